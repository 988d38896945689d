"""``bench`` command line: run, probe, compare, lockcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from .errors import TierflowError
from .tier import MIB, Tier, TierKind, TierSpec, probe_bandwidth

FLAGS = ("enable_caching", "skip_gradients", "atomic_rw", "multi_path")


def _cmd_run(args) -> int:
    from .harness.bench import run_benchmark
    from .harness.config import RunConfig, load_config
    from .harness.report import emit_report, load_summary

    cfg = load_config(args.config) if args.config else RunConfig()
    mode = args.mode or cfg.mode
    overrides = {f: getattr(args, f) for f in FLAGS}
    if args.mode:
        cfg = cfg.with_mode(mode, **overrides)
    else:
        cfg = replace(cfg, flags=replace(cfg.flags, **{k: v for k, v in overrides.items()
                                                       if v is not None}))
    if args.multiprocess is not None:
        cfg.multiprocess = args.multiprocess
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if args.warmup is not None:
        cfg.warmup_iterations = args.warmup
    cfg.validate()
    result = run_benchmark(cfg)
    if args.trace_out:
        result.trace.write(args.trace_out)
    baseline = load_summary(args.baseline) if args.baseline else None
    if args.report_out:
        emit_report(result, args.report_out, baseline)
    summary = result.summary()
    for r in result.reports:
        tag = "warmup" if r.iteration <= cfg.warmup_iterations else "measured"
        print(f"iter {r.iteration:3d} [{tag:8s}] backward {r.backward_s:8.3f}s "
              f"update {r.update_s:8.3f}s  {r.update_throughput_mps:9.2f} Mparams/s  "
              f"cache hits {r.cache_hits}")
    print(json.dumps({k: v for k, v in summary.items()
                      if k.startswith("mean_") or k == "mode"}, indent=2))
    return 0


def _cmd_probe(args) -> int:
    kind = TierKind.REMOTE_DIR if args.remote else TierKind.LOCAL_DIR
    tier = Tier(TierSpec(0, kind, root=args.tier, read_bw=1.0, write_bw=1.0))
    read_bw, write_bw = probe_bandwidth(tier, args.probe_mib * MIB, args.repetitions)
    print(json.dumps({"root": args.tier, "read_bw": read_bw, "write_bw": write_bw,
                      "effective_bw": min(read_bw, write_bw),
                      "low_confidence": tier.spec.low_confidence}, indent=2))
    return 0


def _cmd_compare(args) -> int:
    from .harness.report import compare, load_summary

    a, b = load_summary(args.report_a), load_summary(args.report_b)
    print(json.dumps(compare(a, b), indent=2))
    return 0


def _cmd_lockcheck(args) -> int:
    from .harness.lockcheck import run_lock_stress
    from .harness.metrics import lock_overlaps

    trace = run_lock_stress(args.workers, args.tiers, args.operations, args.multiprocess)
    overlaps = lock_overlaps(trace)
    bad = sum(len(v) for v in overlaps.values())
    held = len(trace.spans("lock_acquire"))
    print(f"{held} lock intervals, {bad} overlapping pairs")
    return 1 if bad else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description="multi-tier offloading benchmark")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a benchmark")
    run.add_argument("--config", help="YAML/JSON run configuration")
    run.add_argument("--mode", choices=("engine", "baseline"))
    run.add_argument("--trace-out", help="event trace path (.csv or JSON lines)")
    run.add_argument("--report-out", help="directory for summary.json and iterations.csv")
    run.add_argument("--baseline", help="baseline summary.json (or its directory) "
                                        "for speedup_vs_baseline")
    run.add_argument("--iterations", type=int)
    run.add_argument("--warmup", type=int)
    run.add_argument("--multiprocess", action=argparse.BooleanOptionalAction, default=None,
                     help="one OS process per worker instead of threads")
    for flag in FLAGS:
        run.add_argument("--" + flag.replace("_", "-"), dest=flag,
                         action=argparse.BooleanOptionalAction, default=None)
    run.set_defaults(func=_cmd_run)

    probe = sub.add_parser("probe", help="measure a directory tier's bandwidth")
    probe.add_argument("--tier", required=True, help="tier root directory")
    probe.add_argument("--remote", action="store_true", help="treat as a remote tier")
    probe.add_argument("--probe-mib", type=int, default=64)
    probe.add_argument("--repetitions", type=int, default=4)
    probe.set_defaults(func=_cmd_probe)

    cmp_ = sub.add_parser("compare", help="speedup of report A over report B")
    cmp_.add_argument("report_a")
    cmp_.add_argument("report_b")
    cmp_.set_defaults(func=_cmd_compare)

    lc = sub.add_parser("lockcheck", help="stress the tier locks and check exclusivity")
    lc.add_argument("--workers", type=int, default=4)
    lc.add_argument("--tiers", type=int, default=2)
    lc.add_argument("--operations", type=int, default=200)
    lc.add_argument("--multiprocess", action="store_true")
    lc.set_defaults(func=_cmd_lockcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TierflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
