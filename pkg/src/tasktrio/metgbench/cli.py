from __future__ import annotations

import argparse
import logging
import sys
import warnings

from .calibrate import UnstableCalibration, calibrate_spin
from .model import Scheduler, SweepConfig
from .report import emit_report, run_sweep


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _seconds(text: str) -> list[float]:
    """Comma list of durations; plain numbers are seconds, ``us``/``ms`` suffixes allowed."""
    out = []
    for x in filter(None, (t.strip() for t in text.split(","))):
        scale = 1e-6 if x.endswith("us") else 1e-3 if x.endswith("ms") else 1.0
        out.append(float(x.rstrip("usm")) * scale)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metgbench", description="Minimum effective task granularity sweeps")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="sweep kernel durations and worker counts")
    r.add_argument("--scheduler", choices=[s.value for s in Scheduler], required=True)
    r.add_argument("--workers", type=_ints, required=True, metavar="W[,W...]")
    r.add_argument("--durations", type=_seconds, required=True, metavar="D[,D...]",
                   help="per-iteration spin times, e.g. 0,50us,1ms")
    r.add_argument("--tasks-per-worker", type=int, default=1024)
    r.add_argument("--iters", type=int, default=None, help="iterations per task (default 256, 1 for bsp)")
    r.add_argument("--repeats", type=int, default=1)
    r.add_argument("--prefetch", type=int, default=1, help="worker prefetch depth (graph)")
    r.add_argument("--bsp-delay", type=float, default=0.0, help="extra seconds on rank 0 (bsp)")
    r.add_argument("--out", required=True, metavar="DIR")
    sub.add_parser("calibrate", help="time the spin kernel")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", UnstableCalibration)
        cal = calibrate_spin()
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    if args.cmd == "calibrate":
        for req, got in cal.samples.items():
            print(f"request {float(req) * 1e3:.3f} ms -> {got * 1e3:.4f} ms")
        print(f"backend {cal.backend}, call overhead {cal.overhead * 1e6:.2f} us, spread {cal.spread:.1%}")
        return 0
    try:
        cfg = SweepConfig(args.scheduler, args.workers, args.durations, args.tasks_per_worker,
                          args.iters, args.repeats, args.prefetch, args.bsp_delay)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    def progress(r):
        status = f"error: {r.error}" if r.error else f"eff {r.efficiency:.3f}"
        print(f"{r.scheduler} W={r.workers} d={r.duration * 1e6:g}us rep={r.repeat}: "
              f"wall {r.phases.wall:.3f}s {status}", file=sys.stderr)

    results = run_sweep(cfg, cal, progress if args.verbose else None)
    try:
        emit_report(results, args.out, cal, cfg)
    except OSError as exc:
        print(f"error: cannot write report: {exc}", file=sys.stderr)
        return 2
    with open(f"{args.out}/summary.txt") as f:
        sys.stdout.write(f.read())
    return 1 if any(r.error for r in results) else 0


if __name__ == "__main__":
    raise SystemExit(main())
