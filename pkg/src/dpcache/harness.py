"""Experiment runner and analyses built on the virtual-clock model."""

from __future__ import annotations

import csv
import io
import logging
import random
import statistics
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from dpcache.catalog import Catalog
from dpcache.core import CacheKey, ModelMeta, PromptLayout, derive_ranges, prefix_keys
from dpcache.engine import EngineCost
from dpcache.orchestrator import CaseLabel, ClientConfig, EdgeClient, QueryResult, SyncWorker
from dpcache.simclock import (
    LOW_END,
    PARTIAL_MATCH_BOUNDARIES,
    PARTIAL_MATCH_PROMPT_TOKENS,
    REFERENCE_BREAKDOWNS,
    DeviceProfile,
    calibrate_profile,
    partial_match_cost,
)
from dpcache.store.client import LocalConnector, TcpConnector
from dpcache.store.server import ServerState
from dpcache.workload import Prompt, WorkloadSpec, generate_workload

logger = logging.getLogger(__name__)

DEFAULT_META = ModelMeta("mock-270m", (("ctx", "2048"), ("quant", "q8_0")), 32000)

CSV_COLUMNS = (
    "case", "client", "domain", "matched_tokens", "token_ms", "bloom_ms", "p_decode_ms",
    "store_ms", "r_decode_ms", "sample_ms", "ttft_ms", "ttlt_ms", "state_bytes",
)


@dataclass
class ReportRow:
    index: int
    client: int
    domain: str
    phase: str
    result: QueryResult

    def csv_values(self) -> list[str]:
        r, b = self.result, self.result.breakdown
        nums = (b.token_ms, b.bloom_ms, b.p_decode_ms, b.store_ms, b.r_decode_ms, b.sample_ms, b.ttft_ms, b.ttlt_ms)
        return [
            r.case.short, str(self.client), self.domain, str(r.matched_tokens),
            *(f"{x:.4f}" for x in nums), f"{r.state_bytes:.0f}",
        ]


@dataclass
class CaseStats:
    count: int
    ttft_ms: float
    ttlt_ms: float
    matched_tokens: float


@dataclass
class ExperimentReport:
    profile: str
    rows: list[ReportRow] = field(default_factory=list)

    def results(self, phase: str | None = None) -> list[QueryResult]:
        return [r.result for r in self.rows if phase is None or r.phase == phase]

    def by_case(self, phase: str | None = None) -> dict[CaseLabel, CaseStats]:
        groups: dict[CaseLabel, list[QueryResult]] = defaultdict(list)
        for res in self.results(phase):
            groups[res.case].append(res)
        return {
            case: CaseStats(
                len(rs),
                statistics.fmean(r.breakdown.ttft_ms for r in rs),
                statistics.fmean(r.breakdown.ttlt_ms for r in rs),
                statistics.fmean(r.matched_tokens for r in rs),
            )
            for case, rs in sorted(groups.items())
        }

    @property
    def degraded_rows(self) -> int:
        return sum(r.result.degraded for r in self.rows)

    def answers(self) -> list[list[int]]:
        return [r.result.answer_tokens for r in sorted(self.rows, key=lambda r: (r.index, r.phase))]

    def reduction_pct(self, metric: str = "ttft", base: CaseLabel = CaseLabel.CASE1_MISS,
                      other: CaseLabel = CaseLabel.CASE5_FULL) -> float:
        """Percentage by which ``other`` is faster than ``base`` on mean ``metric``."""
        stats = self.by_case()
        a = getattr(stats[base], f"{metric}_ms")
        b = getattr(stats[other], f"{metric}_ms")
        return 100.0 * (1.0 - b / a)

    def write_csv(self, out: str | Path | io.TextIOBase) -> None:
        if isinstance(out, (str, Path)):
            with open(out, "w", newline="") as fh:
                self.write_csv(fh)
            return
        w = csv.writer(out, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in sorted(self.rows, key=lambda r: (r.index, r.phase)):
            w.writerow(row.csv_values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"profile: {self.profile}  queries: {len(self.rows)}  degraded: {self.degraded_rows}",
                 f"{'case':<6} {'n':>5} {'matched':>8} {'TTFT ms':>11} {'TTLT ms':>11}"]
        for case, s in self.by_case().items():
            lines.append(f"{case.short:<6} {s.count:>5} {s.matched_tokens:>8.1f} {s.ttft_ms:>11.2f} {s.ttlt_ms:>11.2f}")
        return "\n".join(lines)


def _make_connectors(state: ServerState | None, address: str | None):
    if address is not None:
        return TcpConnector(address), TcpConnector(address)
    conn = LocalConnector(state)
    return conn, conn


def run_experiment(
    profile: DeviceProfile,
    workload: Sequence[Prompt],
    clients: int = 1,
    *,
    meta: ModelMeta = DEFAULT_META,
    config: ClientConfig | None = None,
    mode: str = "stream",
    serial: bool = True,
    server: ServerState | None = None,
    address: str | None = None,
    store_enabled: bool = True,
    sync_interval_s: float = 0.01,
    realtime: bool = False,
) -> ExperimentReport:
    """Dispatch prompts round-robin over ``clients`` simulated edge devices.

    ``mode="stream"`` runs the workload once in order, so caching comes from
    earlier prompts.  ``mode="paired"`` measures every prompt twice from an
    empty cache, first as a miss and then as an immediate repeat, which is
    the like-for-like comparison of a cold and a fully cached query.

    In serial mode every client pulls the master catalog before each of its
    queries; otherwise each client runs on its own thread with a background
    sync worker at ``sync_interval_s``.  ``address`` points at an external
    server instead of an in-process one.
    """
    if clients < 1:
        raise ValueError("clients must be >= 1")
    if mode not in ("stream", "paired"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "paired" and (address is not None or not serial):
        raise ValueError("paired mode needs an in-process server and serial dispatch")
    config = config or ClientConfig()
    if address is None and server is None:
        server = ServerState()
    report = ExperimentReport(profile.name)

    edge: list[EdgeClient] = []
    workers: list[SyncWorker | None] = []
    params = server.catalog.params if server is not None else Catalog.new().params
    for i in range(clients):
        if store_enabled:
            conn, sync_conn = _make_connectors(server, address)
        else:
            conn = sync_conn = None
        c = EdgeClient(meta, profile, conn, Catalog(params), config, name=f"client{i}")
        edge.append(c)
        workers.append(SyncWorker(c.catalog, sync_conn, sync_interval_s) if sync_conn else None)

    def pause(res: QueryResult) -> None:
        if realtime:
            time.sleep(res.breakdown.ttlt_ms / 1000.0)

    if serial:
        for idx, prompt in enumerate(workload):
            ci = idx % clients
            c, w = edge[ci], workers[ci]
            if mode == "paired":
                server.clear()
                for other, ow in zip(edge, workers):
                    other.catalog.reset_from(Catalog(params))
                    if ow is not None:
                        ow.master_version = 0
            if w is not None:
                w.step()
            res = c.run_query(prompt.layout)
            pause(res)
            report.rows.append(ReportRow(idx, ci, prompt.domain, "miss" if mode == "paired" else "stream", res))
            if mode == "paired":
                res = c.run_query(prompt.layout)
                pause(res)
                report.rows.append(ReportRow(idx, ci, prompt.domain, "repeat", res))
        return report

    lock = threading.Lock()

    def drive(ci: int) -> None:
        c = edge[ci]
        for idx in range(ci, len(workload), clients):
            res = c.run_query(workload[idx].layout)
            pause(res)
            with lock:
                report.rows.append(ReportRow(idx, ci, workload[idx].domain, "stream", res))

    for w in workers:
        if w is not None:
            w.start()
    try:
        threads = [threading.Thread(target=drive, args=(i,)) for i in range(clients)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    finally:
        for w in workers:
            if w is not None:
                w.stop()
    report.rows.sort(key=lambda r: r.index)
    return report


def mean_prompt_tokens(workload: Iterable[Prompt]) -> float:
    return statistics.fmean(len(p.layout) for p in workload)


def reproduce_hit_vs_miss(
    name: str, spec: WorkloadSpec, clients: int = 1, meta: ModelMeta = DEFAULT_META
) -> tuple[ExperimentReport, DeviceProfile]:
    """Paired miss/repeat run with a profile calibrated to this workload's length."""
    workload = generate_workload(spec)
    profile = calibrate_profile(name, mean_prompt_tokens(workload))
    report = run_experiment(profile, workload, clients, meta=meta, mode="paired")
    return report, profile


def calibration_closure(name: str) -> dict[str, float]:
    """Hit/miss TTFT and TTLT ratios (percent) computed from a reference breakdown."""
    rows = REFERENCE_BREAKDOWNS[name]
    miss, hit = rows["miss"], rows["hit"]
    return {
        "ttft_ratio_pct": 100.0 * hit.ttft / miss.ttft,
        "ttlt_ratio_pct": 100.0 * hit.ttlt / miss.ttlt,
    }


# -- break-even -------------------------------------------------------------

def net_benefit_ms(profile: DeviceProfile, matched: int, transfer_ms: float | None = None) -> float:
    """Prefill time saved by restoring ``matched`` tokens minus the cost of doing so."""
    saved = profile.engine_cost.prefill_cost(0, matched)
    if transfer_ms is None:
        transfer_ms = profile.transfer_ms_for_tokens(matched)
    return saved - transfer_ms - profile.bloom_probe_ms


def break_even(profile: DeviceProfile, prompt_length_tokens: int) -> int | None:
    """Smallest matched-prefix length whose restore beats local prefill.

    ``None`` means no prefix of the prompt is worth fetching.
    """
    for m in range(1, prompt_length_tokens + 1):
        if net_benefit_ms(profile, m) > 0:
            return m
    return None


@dataclass
class BreakEvenRow:
    case: CaseLabel
    matched: int
    saved_ms: float
    transfer_ms: float
    net_ms: float


def break_even_table(
    profile: DeviceProfile,
    matched: Sequence[int] = PARTIAL_MATCH_BOUNDARIES,
    transfer_ms: float | None = None,
) -> list[BreakEvenRow]:
    """Per-case saving vs. fetch cost; ``transfer_ms`` fixes the fetch cost for every case."""
    rows = []
    for case, m in zip(list(CaseLabel)[1:], matched):
        t = profile.transfer_ms_for_tokens(m) if transfer_ms is None else transfer_ms
        saved = profile.engine_cost.prefill_cost(0, m)
        rows.append(BreakEvenRow(case, m, saved, t, saved - t - profile.bloom_probe_ms))
    return rows


# -- false-positive overhead ------------------------------------------------

def fp_overhead_expectation(profile: DeviceProfile, fpr: float) -> float:
    """Expected extra store time per miss from catalog false positives."""
    if not 0.0 <= fpr < 1.0:
        raise ValueError("fpr must be in [0, 1)")
    return fpr * profile.transfer.transfer_ms(profile.reference_state_bytes)


def fp_overhead_monte_carlo(
    profile: DeviceProfile, fpr: float, queries: int = 100_000, seed: int = 0,
    meta: ModelMeta = DEFAULT_META,
) -> float:
    """Mean extra store time per miss, measured by injecting false positives.

    Each simulated miss probes one absent key of reference length through a
    client whose catalog reports false positives at rate ``fpr``; a positive
    costs a download attempt against an empty store.
    """
    client = EdgeClient(
        meta, profile, LocalConnector(ServerState(Catalog.new(1000, 0.01))), Catalog.new(1000, 0.01),
        ClientConfig(inject_fp_rate=fpr, fp_seed=seed),
    )
    rng = random.Random(seed)
    per_fp = profile.transfer.transfer_ms(profile.reference_state_bytes)
    added = 0.0
    for _ in range(queries):
        key = CacheKey(rng.getrandbits(64))
        if client.probe(key) and client.connector.get(key) is None:
            added += per_fp
    return added / queries


# -- partial matching -------------------------------------------------------

def partial_match_layout(
    boundaries: Sequence[int] = PARTIAL_MATCH_BOUNDARIES, n_examples: int = 5,
    vocab_size: int = 32000, seed: int = 0,
) -> PromptLayout:
    """A prompt whose instruction / first example / all examples / full ends sit at ``boundaries``."""
    instr_end, first_end, all_end, total = boundaries
    rng = random.Random(seed)
    toks = [rng.randrange(1, vocab_size) for _ in range(total)]
    rest = all_end - first_end
    sizes = [rest // (n_examples - 1) + (1 if i < rest % (n_examples - 1) else 0) for i in range(n_examples - 1)]
    cuts = [instr_end, first_end]
    for s in sizes:
        cuts.append(cuts[-1] + s)
    examples = tuple(tuple(toks[a:b]) for a, b in zip(cuts, cuts[1:]))
    return PromptLayout(tuple(toks[:instr_end]), examples, tuple(toks[all_end:]))


@dataclass
class PartialMatchRow:
    case: CaseLabel
    matched: int
    matched_pct: float
    total_decode_ms: float
    saving_ms: float
    answer: list[int]


def partial_matching_table(
    cost: EngineCost | None = None, profile: DeviceProfile = LOW_END,
    layout: PromptLayout | None = None, meta: ModelMeta = DEFAULT_META,
) -> list[PartialMatchRow]:
    """Decode time for each cache case, measured by running real queries.

    For every case a fresh store is seeded with only the state for that
    case's range, so the client restores exactly that prefix.
    """
    cost = cost or partial_match_cost("low-end")
    profile = replace(profile, engine_cost=cost)
    layout = layout or partial_match_layout(vocab_size=meta.vocab_size)
    ranges = derive_ranges(layout)
    keys = prefix_keys(meta, layout.full(), [r.end_index for r in ranges])

    seed_state = ServerState(Catalog.new(1000, 0.01))
    EdgeClient(meta, profile, LocalConnector(seed_state), Catalog.new(1000, 0.01)).run_query(layout)

    rows: list[PartialMatchRow] = []
    for wanted in [None, *ranges]:
        st = ServerState(Catalog.new(1000, 0.01))
        if wanted is not None:
            k = keys[ranges.index(wanted)]
            st.put(k, seed_state.get(k))
        conn = LocalConnector(st)
        client = EdgeClient(meta, profile, conn, Catalog.new(1000, 0.01))
        SyncWorker(client.catalog, conn).step()
        res = client.run_query(layout)
        total = res.breakdown.p_decode_ms + res.breakdown.r_decode_ms
        rows.append(PartialMatchRow(res.case, res.matched_tokens, 100.0 * res.matched_tokens / len(layout),
                                    total, 0.0, res.answer_tokens))
    base = rows[0].total_decode_ms
    for r in rows:
        r.saving_ms = base - r.total_decode_ms
    return rows


# -- plots ------------------------------------------------------------------

def plot_report(report: ExperimentReport, path: str | Path) -> None:
    """Bar chart of mean TTFT/TTLT per case."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    stats = report.by_case()
    labels = [c.short for c in stats]
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = range(len(labels))
    ax.bar([x - 0.2 for x in xs], [s.ttft_ms / 1000 for s in stats.values()], 0.4, label="TTFT")
    ax.bar([x + 0.2 for x in xs], [s.ttlt_ms / 1000 for s in stats.values()], 0.4, label="TTLT")
    ax.set_xticks(list(xs), labels)
    ax.set_ylabel("seconds (virtual)")
    ax.set_title(report.profile)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_break_even(rows: Sequence[PartialMatchRow], transfer_ms: float, path: str | Path) -> None:
    """Stacked bars: decode time plus fetch overhead for every cached case."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [r.case.short for r in rows]
    decode = [r.total_decode_ms / 1000 for r in rows]
    fetch = [0.0 if r.case is CaseLabel.CASE1_MISS else transfer_ms / 1000 for r in rows]
    ax.bar(labels, decode, label="decode")
    ax.bar(labels, fetch, bottom=decode, label="fetch")
    ax.axhline(decode[0], linestyle="--", color="gray", linewidth=1)
    ax.set_ylabel("seconds (virtual)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
