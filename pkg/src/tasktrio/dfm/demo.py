"""Read synthetic score tables, collect their ranges, and build a 2-D histogram.

Each "file" is a seeded random table of (score, r3) rows, so every run and
every rank count produces the same histogram.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass

import numpy as np

from .comm import Communicator, run_processes, run_ranks
from .core import Context

log = logging.getLogger(__name__)

BINS = (301, 201)


def read_scored(i: int) -> list[np.ndarray]:
    """One or two tables per file index, deterministic in ``i``."""
    rng = np.random.default_rng(i)
    tables = []
    for _ in range(1 + i % 2):
        rows = int(rng.integers(40, 120))
        score = rng.normal(-7.0, 1.5, rows)
        r3 = 0.3 * score + rng.normal(0.0, 0.5, rows)
        tables.append(np.column_stack([score, r3]))
    return tables


def best_scores(table: np.ndarray) -> np.ndarray:
    """Keep the better (lower) three quarters of the scores."""
    order = np.argsort(table[:, 0], kind="stable")
    return table[order[: max(1, 3 * len(order) // 4)]]


def stat(table: np.ndarray) -> np.ndarray:
    return np.stack([table.min(axis=0), table.max(axis=0)])


@dataclass
class DemoResult:
    tables: int
    rows: int
    lo: list[float]
    hi: list[float]
    histogram: np.ndarray
    phases: dict[str, float]


def pipeline(comm: Communicator, n: int) -> DemoResult | None:
    C = Context(comm)
    t0 = time.perf_counter()
    dfm = C.iterates(n).flatMap(read_scored).map(best_scores)
    count = dfm.len()
    t1 = time.perf_counter()
    stats = dfm.map(stat).collect()
    if C.rank == 0 and stats:
        lo, hi = np.min([s[0] for s in stats], axis=0), np.max([s[1] for s in stats], axis=0)
    else:
        lo = hi = np.zeros(2)
    t2 = time.perf_counter()
    lo, hi = C.comm.bcast((lo, hi), root=0)
    edges = [np.linspace(lo[k], hi[k], BINS[k] + 1) for k in range(2)]
    hist = dfm.map(lambda t: np.histogram2d(t[:, 0], t[:, 1], bins=edges)[0]).reduce(np.add, np.zeros(BINS))
    rows = dfm.map(len).reduce(lambda a, b: a + b, 0)
    t3 = time.perf_counter()
    if C.rank != 0:
        return None
    phases = {"read": t1 - t0, "stats": t2 - t1, "histogram": t3 - t2}
    return DemoResult(count, int(rows), lo.tolist(), hi.tolist(), hist, phases)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfm-demo", description=__doc__.splitlines()[0])
    p.add_argument("--ranks", type=int, default=4, help="number of ranks (default 4)")
    p.add_argument("--n", type=int, default=256, help="number of synthetic files (default 256)")
    p.add_argument("--backend", choices=["thread", "process"], default="thread",
                   help="in-process ranks or forked processes over sockets")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if args.ranks < 1 or args.n < 0:
        print("dfm-demo: --ranks must be >= 1 and --n >= 0", file=sys.stderr)
        return 2
    launch = run_ranks if args.backend == "thread" else run_processes
    res = launch(args.ranks, pipeline, args.n)[0]
    ph = res.phases
    print(f"Read {res.tables} tables ({res.rows} rows) to {args.ranks} processes in {ph['read']:.3f} secs.")
    print(f"Collected stats to rank 0 in {ph['stats']:.3f} secs.")
    print(f"  score range [{res.lo[0]:.3f}, {res.hi[0]:.3f}], r3 range [{res.lo[1]:.3f}, {res.hi[1]:.3f}]")
    print(f"Collected histogram in {ph['histogram']:.3f} secs.")
    print(f"  {BINS[0]}x{BINS[1]} bins, total count {int(res.histogram.sum())}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
