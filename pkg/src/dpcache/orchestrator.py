"""Client-side query pipeline: tokenize, probe, fetch or prefill, upload, respond.

A query walks the prompt's cacheable ranges longest-first.  Each range costs
one local catalog probe; a positive probe triggers one download.  A download
that comes back empty or fails validation is a catalog false positive and
the walk continues with the next shorter range (or, in full-decode-on-fp mode,
goes straight to a full prefill).  Whatever is not restored is prefilled
locally, and states for the ranges passed on the way are uploaded.
"""

from __future__ import annotations

import enum
import logging
import threading
from dataclasses import dataclass, field, fields

from dpcache.catalog import Catalog
from dpcache.core import (
    CacheKey,
    ModelMeta,
    PrefixRange,
    PromptLayout,
    derive_ranges,
    fnv1a_64,
    prefix_keys,
)
from dpcache.engine import Engine, EngineState, MockEngine
from dpcache.errors import CatalogMismatch, DecodeError, StoreError, Unavailable
from dpcache.simclock import DeviceProfile, VirtualClock
from dpcache.store.client import StoreConnector
from dpcache.store.protocol import StateBlob

logger = logging.getLogger(__name__)


class CaseLabel(enum.IntEnum):
    CASE1_MISS = 1
    CASE2_INSTRUCTION = 2
    CASE3_INSTR_FIRST_EXAMPLE = 3
    CASE4_INSTR_ALL_EXAMPLES = 4
    CASE5_FULL = 5

    @property
    def short(self) -> str:
        return f"Case{int(self)}"

    @classmethod
    def for_range(cls, r: PrefixRange | None) -> "CaseLabel":
        if r is None:
            return cls.CASE1_MISS
        return cls(int(r.label) + 1)


@dataclass
class LatencyBreakdown:
    """Virtual milliseconds per pipeline component.

    ``upload_ms`` is tracked separately and only folded into ``store_ms``
    when the client attributes uploads to TTFT.
    """

    token_ms: float = 0.0
    bloom_ms: float = 0.0
    p_decode_ms: float = 0.0
    store_ms: float = 0.0
    r_decode_ms: float = 0.0
    sample_ms: float = 0.0
    upload_ms: float = 0.0

    @property
    def ttft_ms(self) -> float:
        return self.token_ms + self.bloom_ms + self.p_decode_ms + self.store_ms

    @property
    def ttlt_ms(self) -> float:
        return self.ttft_ms + self.r_decode_ms + self.sample_ms

    def as_dict(self) -> dict[str, float]:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["ttft_ms"] = self.ttft_ms
        d["ttlt_ms"] = self.ttlt_ms
        return d


@dataclass
class QueryResult:
    answer_tokens: list[int]
    case: CaseLabel
    breakdown: LatencyBreakdown
    matched_tokens: int
    uploads_performed: int
    prompt_tokens: int = 0
    probes: int = 0
    downloads: int = 0
    false_positives: int = 0
    degraded: bool = False
    state_bytes: float = 0.0


@dataclass
class ClientConfig:
    """Knobs for one edge client.

    ``upload_attribution`` is ``"background"`` (uploads excluded from TTFT,
    reported in ``upload_ms``) or ``"ttft"`` (uploads charged to
    ``store_ms``).  ``inject_fp_rate`` makes the catalog answer "present"
    for that fraction of absent keys, deterministically per key.
    """

    min_match_tokens: int = 1
    full_decode_on_fp: bool = False
    upload_attribution: str = "background"
    max_new_tokens: int = 1
    inject_fp_rate: float = 0.0
    fp_seed: int = 0

    def __post_init__(self) -> None:
        if self.upload_attribution not in ("background", "ttft"):
            raise ValueError(f"upload_attribution must be 'background' or 'ttft', got {self.upload_attribution!r}")
        if not 0.0 <= self.inject_fp_rate < 1.0:
            raise ValueError("inject_fp_rate must be in [0, 1)")


def probe_ranges(
    ranges: list[PrefixRange],
    keys: list[CacheKey],
    probe,
    min_match_tokens: int = 1,
) -> list[tuple[PrefixRange, CacheKey]]:
    """Catalog-positive ranges, longest first, ignoring ranges below the threshold."""
    out = []
    for r, k in sorted(zip(ranges, keys), key=lambda rk: -rk[0].end_index):
        if r.end_index < min_match_tokens:
            continue
        if probe(k):
            out.append((r, k))
    return out


def _injected(key: CacheKey, rate: float, seed: int) -> bool:
    if rate <= 0.0:
        return False
    h = fnv1a_64(key.digest.to_bytes(8, "little") + seed.to_bytes(8, "little", signed=True))
    return h / 2.0**64 < rate


class EdgeClient:
    """One edge device: an engine, a local catalog and a store connection."""

    def __init__(
        self,
        meta: ModelMeta,
        profile: DeviceProfile,
        connector: StoreConnector | None = None,
        catalog: Catalog | None = None,
        config: ClientConfig | None = None,
        engine: Engine | None = None,
        name: str = "client",
    ):
        self.meta = meta
        self.profile = profile
        self.connector = connector
        self.catalog = catalog if catalog is not None else Catalog.new()
        self.config = config or ClientConfig()
        self.engine = engine if engine is not None else MockEngine(meta.vocab_size, profile.engine_cost)
        self.name = name
        self.clock = VirtualClock()

    def probe(self, key: CacheKey) -> bool:
        if self.catalog.contains(key):
            return True
        return _injected(key, self.config.inject_fp_rate, self.config.fp_seed)

    def _fetch(self, key: CacheKey, prefix: tuple[int, ...]) -> EngineState | None:
        """Download and validate one state; ``None`` means it was not usable."""
        blob = self.connector.get(key)
        if blob is None or not blob.matches(key, self.meta, prefix):
            return None
        try:
            state = self.engine.restore_state(blob.payload)
        except DecodeError:
            return None
        if state.consumed != prefix:
            return None
        return state

    def run_query(self, layout: PromptLayout) -> QueryResult:
        cfg, prof = self.config, self.profile
        bd = LatencyBreakdown(token_ms=self.engine.cost.tokenize_ms)
        full = layout.full()
        ranges = derive_ranges(layout)
        keys = prefix_keys(self.meta, full, [r.end_index for r in ranges])
        key_of = dict(zip(ranges, keys))

        # Step 2/3a: longest-first probe, fetch on positive
        restored: PrefixRange | None = None
        state = self.engine.empty_state()
        probes = downloads = fps = 0
        degraded = self.connector is None
        failed: set[PrefixRange] = set()
        for r in reversed(ranges):
            if r.end_index < cfg.min_match_tokens:
                break
            probes += 1
            bd.bloom_ms += prof.bloom_probe_ms
            if degraded or not self.probe(key_of[r]):
                continue
            try:
                fetched = self._fetch(key_of[r], full[: r.end_index])
            except Unavailable as exc:
                logger.warning("%s: store unavailable, decoding locally: %s", self.name, exc)
                degraded = True
                continue
            downloads += 1
            bd.store_ms += prof.transfer_ms_for_tokens(r.end_index)
            if fetched is not None:
                restored, state = r, fetched
                break
            fps += 1
            failed.add(r)
            if cfg.full_decode_on_fp:
                break

        # Step 3b: prefill the rest, snapshotting states worth uploading
        start = restored.end_index if restored else 0
        to_upload = [
            r for r in ranges
            if r.end_index > start
            and not degraded
            and (r in failed or not self.catalog.contains(key_of[r]))
        ]
        snapshots: list[tuple[PrefixRange, bytes]] = []
        pos = start
        for r in to_upload:
            state, ms = self.engine.prefill(state, full[pos : r.end_index])
            bd.p_decode_ms += ms
            pos = r.end_index
            snapshots.append((r, self.engine.save_state(state)))
        state, ms = self.engine.prefill(state, full[pos:])
        bd.p_decode_ms += ms

        uploads = 0
        for r, payload in snapshots:
            key = key_of[r]
            try:
                self.connector.put(key, StateBlob(key.digest, full[: r.end_index], payload))
            except Unavailable as exc:
                logger.warning("%s: upload failed, store unavailable: %s", self.name, exc)
                degraded = True
                break
            except StoreError as exc:
                logger.warning("%s: upload of %s rejected: %s", self.name, key, exc)
                continue
            self.catalog.insert(key)
            uploads += 1
            bd.upload_ms += prof.transfer_ms_for_tokens(r.end_index)
        if cfg.upload_attribution == "ttft":
            bd.store_ms += bd.upload_ms

        # Step 4
        gen = self.engine.generate(state, cfg.max_new_tokens)
        bd.r_decode_ms = gen.response_ms
        bd.sample_ms = gen.sample_ms
        self.clock.charge("query", bd.ttlt_ms)

        case = CaseLabel.CASE1_MISS if degraded and restored is None else CaseLabel.for_range(restored)
        return QueryResult(
            answer_tokens=gen.tokens,
            case=case,
            breakdown=bd,
            matched_tokens=restored.end_index if restored else 0,
            uploads_performed=uploads,
            prompt_tokens=len(full),
            probes=probes,
            downloads=downloads,
            false_positives=fps,
            degraded=degraded,
            state_bytes=prof.state_bytes(len(full)),
        )


@dataclass
class SyncWorker:
    """Pulls the master catalog and OR-merges it into a local one.

    ``step()`` performs one pull; ``start()`` runs it every ``interval_s`` on
    a daemon thread.  ``master_version`` is the last master version merged,
    which is what gets sent as ``since_version`` (the local catalog's own
    version also counts local inserts and would skip peer updates).
    """

    catalog: Catalog
    connector: StoreConnector
    interval_s: float = 1.0
    master_version: int = 0
    pulls: int = 0
    merges: int = 0
    failures: int = 0
    bytes_received: int = 0
    _stop: threading.Event = field(default_factory=threading.Event, repr=False)
    _thread: threading.Thread | None = field(default=None, repr=False)

    def step(self) -> bool:
        """One sync round; returns True if new master data was merged."""
        self.pulls += 1
        try:
            pulled = self.connector.pull_catalog(self.master_version)
        except Unavailable as exc:
            self.failures += 1
            logger.warning("catalog sync failed, retrying next interval: %s", exc)
            return False
        if pulled is None:
            return False
        version, data = pulled
        self.bytes_received += len(data)
        master = Catalog.deserialize(data)
        try:
            self.catalog.merge_from(master.bits, version)
        except CatalogMismatch:
            logger.warning("catalog parameters changed on the server; replacing local catalog")
            self.catalog.reset_from(master)
        self.master_version = version
        self.merges += 1
        return True

    def _run(self) -> None:
        while not self._stop.wait(self.interval_s):
            self.step()

    def start(self) -> "SyncWorker":
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, name="dpcache-sync", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None


def sync_loop(catalog: Catalog, connector: StoreConnector, interval_s: float) -> SyncWorker:
    """Start a background sync worker; call ``.stop()`` on the result to end it."""
    return SyncWorker(catalog, connector, interval_s).start()
