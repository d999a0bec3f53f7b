"""Command-line entry point: ``dpcache serve|client|bench|breakeven|fpcheck``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from dpcache.catalog import Catalog
from dpcache.core import ModelMeta
from dpcache.errors import DPCacheError
from dpcache.harness import (
    DEFAULT_META,
    break_even,
    break_even_table,
    fp_overhead_expectation,
    fp_overhead_monte_carlo,
    mean_prompt_tokens,
    partial_matching_table,
    plot_break_even,
    plot_report,
    run_experiment,
)
from dpcache.orchestrator import ClientConfig, EdgeClient, SyncWorker
from dpcache.simclock import PARTIAL_MATCH_PROMPT_TOKENS, calibrate_profile, resolve_profile
from dpcache.store.client import TcpConnector
from dpcache.store.server import DEFAULT_MAX_BLOB_BYTES, ServerState, serve
from dpcache.workload import ToyTokenizer, WorkloadSpec, generate_workload, layout_from_text

log = logging.getLogger("dpcache")


def _meta(args) -> ModelMeta:
    params = dict(p.split("=", 1) for p in args.model_param)
    return ModelMeta.from_dict(args.model, params, args.vocab_size)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", default=DEFAULT_META.model_name)
    p.add_argument("--model-param", action="append", metavar="KEY=VALUE",
                   default=[f"{k}={v}" for k, v in DEFAULT_META.config_params])
    p.add_argument("--vocab-size", type=int, default=DEFAULT_META.vocab_size)


def cmd_serve(args) -> int:
    persist = None if args.persist == "off" else args.persist
    state = ServerState(Catalog.new(args.capacity, args.fpr), args.max_blob_bytes, persist)
    try:
        serve(args.bind, state)
    except KeyboardInterrupt:
        pass
    finally:
        state.close()
    return 0


def cmd_client(args) -> int:
    profile = resolve_profile(args.profile)
    meta = _meta(args)
    text = Path(args.prompt_file).read_text() if args.prompt_file != "-" else sys.stdin.read()
    layout = layout_from_text(text, ToyTokenizer(meta.vocab_size))
    conn = TcpConnector(args.server, timeout=args.timeout)
    client = EdgeClient(meta, profile, conn, Catalog.new(args.capacity, args.fpr),
                        ClientConfig(min_match_tokens=args.min_match_tokens,
                                     full_decode_on_fp=args.full_decode_on_fp,
                                     max_new_tokens=args.max_new_tokens))
    SyncWorker(client.catalog, TcpConnector(args.server, timeout=args.timeout)).step()
    res = client.run_query(layout)
    print("answer:", " ".join(map(str, res.answer_tokens)))
    print(f"case: {res.case.short}  matched: {res.matched_tokens}/{res.prompt_tokens}  "
          f"uploads: {res.uploads_performed}  degraded: {res.degraded}")
    for k, v in res.breakdown.as_dict().items():
        print(f"  {k:<12} {v:12.2f}")
    return 0


def cmd_bench(args) -> int:
    spec = WorkloadSpec(args.domains, args.examples, args.questions, args.max_question_words,
                        args.seed, args.vocab_size)
    workload = generate_workload(spec)
    profile = resolve_profile(args.profile)
    if args.calibrate:
        profile = calibrate_profile(profile.name, mean_prompt_tokens(workload))
    config = ClientConfig(min_match_tokens=args.min_match_tokens, full_decode_on_fp=args.full_decode_on_fp,
                          upload_attribution=args.upload_attribution,
                          inject_fp_rate=args.inject_fp_rate, fp_seed=args.seed)
    report = run_experiment(profile, workload, args.clients, meta=_meta(args), config=config,
                            mode=args.mode, serial=not args.concurrent, address=args.server,
                            realtime=args.realtime)
    if args.out:
        report.write_csv(args.out)
    else:
        report.write_csv(sys.stdout)
    if args.plot:
        plot_report(report, args.plot)
    print(report.summary(), file=sys.stderr)
    return 0


def cmd_breakeven(args) -> int:
    profile = resolve_profile(args.profile)
    threshold = break_even(profile, args.prompt_tokens)
    print(f"profile: {profile.name}")
    print(f"break-even matched tokens: {threshold if threshold is not None else 'never'}")
    fixed = args.transfer_ms
    print(f"{'case':<6} {'matched':>8} {'saved ms':>10} {'fetch ms':>10} {'net ms':>10}")
    for r in break_even_table(profile, transfer_ms=fixed):
        print(f"{r.case.short:<6} {r.matched:>8} {r.saved_ms:>10.2f} {r.transfer_ms:>10.2f} {r.net_ms:>10.2f}")
    if args.table:
        print()
        print(f"{'case':<6} {'matched':>8} {'%':>7} {'decode ms':>11} {'saving ms':>10}")
        rows = partial_matching_table(profile=profile)
        for r in rows:
            print(f"{r.case.short:<6} {r.matched:>8} {r.matched_pct:>7.2f} {r.total_decode_ms:>11.2f} {r.saving_ms:>10.2f}")
        if args.plot:
            plot_break_even(rows, fixed if fixed is not None else profile.transfer.transfer_ms(profile.reference_state_bytes), args.plot)
    return 0


def cmd_fpcheck(args) -> int:
    profile = resolve_profile(args.profile)
    analytic = fp_overhead_expectation(profile, args.fpr)
    print(f"analytic     {analytic:.4f} ms per miss")
    if args.queries > 0:
        mc = fp_overhead_monte_carlo(profile, args.fpr, args.queries, args.seed)
        err = abs(mc - analytic) / analytic if analytic else 0.0
        print(f"monte-carlo  {mc:.4f} ms per miss over {args.queries} queries ({100 * err:.2f}% off)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpcache", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the cache server")
    p.add_argument("--bind", default="127.0.0.1:7711")
    p.add_argument("--max-blob-bytes", type=int, default=DEFAULT_MAX_BLOB_BYTES)
    p.add_argument("--persist", default="off", help="append-only file path, or 'off'")
    p.add_argument("--capacity", type=int, default=1_000_000)
    p.add_argument("--fpr", type=float, default=0.01)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("client", help="run one query against a server")
    p.add_argument("--server", required=True)
    p.add_argument("--prompt-file", required=True, help="blank-line separated: instruction, examples..., question")
    p.add_argument("--profile", default="low-end")
    p.add_argument("--min-match-tokens", type=int, default=1)
    p.add_argument("--full-decode-on-fp", action="store_true", help="on a false positive, prefill everything instead of trying shorter ranges")
    p.add_argument("--max-new-tokens", type=int, default=1)
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--capacity", type=int, default=1_000_000)
    p.add_argument("--fpr", type=float, default=0.01)
    _add_model_flags(p)
    p.set_defaults(func=cmd_client)

    p = sub.add_parser("bench", help="run a synthetic workload and write a CSV report")
    p.add_argument("--profile", default="low-end", help="low-end, high-end or a profile .toml")
    p.add_argument("--domains", type=int, default=57)
    p.add_argument("--examples", type=int, default=5)
    p.add_argument("--questions", type=int, default=2)
    p.add_argument("--max-question-words", type=int, default=256)
    p.add_argument("--clients", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--plot", help="write a TTFT/TTLT bar chart here")
    p.add_argument("--mode", choices=("stream", "paired"), default="stream")
    p.add_argument("--full-decode-on-fp", action="store_true", help="on a false positive, prefill everything instead of trying shorter ranges")
    p.add_argument("--realtime", action="store_true", help="sleep for each query's virtual latency")
    p.add_argument("--concurrent", action="store_true", help="one thread per client instead of serial dispatch")
    p.add_argument("--serial", dest="concurrent", action="store_false")
    p.add_argument("--calibrate", action="store_true",
                   help="recalibrate the profile to this workload's mean prompt length")
    p.add_argument("--server", help="external server host:port (default: in-process)")
    p.add_argument("--min-match-tokens", type=int, default=1)
    p.add_argument("--upload-attribution", choices=("background", "ttft"), default="background")
    p.add_argument("--inject-fp-rate", type=float, default=0.0)
    _add_model_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("breakeven", help="break-even matched length and per-case benefit")
    p.add_argument("--profile", default="low-end")
    p.add_argument("--prompt-tokens", type=int, default=PARTIAL_MATCH_PROMPT_TOKENS)
    p.add_argument("--transfer-ms", type=float, help="fixed fetch cost for every case instead of the size model")
    p.add_argument("--table", action="store_true", help="also run the partial-matching decode table")
    p.add_argument("--plot")
    p.set_defaults(func=cmd_breakeven)

    p = sub.add_parser("fpcheck", help="expected false-positive overhead per miss")
    p.add_argument("--profile", default="low-end")
    p.add_argument("--fpr", type=float, default=0.01)
    p.add_argument("--queries", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fpcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (DPCacheError, OSError, ValueError) as exc:
        print(f"dpcache: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
