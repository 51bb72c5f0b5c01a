"""Sweep driver and result files."""

from __future__ import annotations

import csv
import json
import logging
import os
import statistics
from collections import defaultdict
from dataclasses import asdict
from typing import Callable

from .analysis import scaling_report
from .calibrate import SpinCalibration
from .model import ROW_FIELDS, PhaseBreakdown, RunResult, Scheduler, SweepConfig
from .runners import run_bsp, run_filemake, run_graph

log = logging.getLogger(__name__)


def run_sweep(cfg: SweepConfig, calibration: SpinCalibration | None = None,
              progress: Callable[[RunResult], None] | None = None) -> list[RunResult]:
    """Every (workers, duration, repeat) combination, in that nesting order.

    A run that raises becomes an error row with zero efficiency and the
    sweep moves on.
    """
    overhead = calibration.overhead if calibration else 0.0
    results = []
    for w in cfg.workers:
        for d in cfg.durations:
            for rep in range(cfg.repeats):
                args = (w, d, cfg.iterations_per_task, cfg.tasks_per_worker, rep, overhead)
                try:
                    if cfg.scheduler is Scheduler.GRAPH:
                        r = run_graph(*args, prefetch=cfg.prefetch_depth)
                    elif cfg.scheduler is Scheduler.BSP:
                        r = run_bsp(*args, delay=cfg.bsp_delay)
                    else:
                        r = run_filemake(*args)
                except Exception as exc:  # noqa: BLE001 - recorded as an error row
                    log.exception("run failed: %s W=%d d=%g", cfg.scheduler.value, w, d)
                    r = RunResult(cfg.scheduler.value, w, d, cfg.iterations_per_task,
                                  w * cfg.tasks_per_worker, rep, 0.0, PhaseBreakdown(0.0),
                                  error=f"{type(exc).__name__}: {exc}")
                results.append(r)
                if progress:
                    progress(r)
    return results


def write_rows(results: list[RunResult], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=ROW_FIELDS)
        writer.writeheader()
        for r in results:
            writer.writerow(r.row())


def read_rows(path: str) -> list[RunResult]:
    ints = {"workers", "iterations", "tasks", "repeat"}
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            v = {k: (int(x) if k in ints else x if k in ("scheduler", "error") else float(x))
                 for k, x in row.items()}
            phases = PhaseBreakdown(**{k: v.pop(k) for k in ("wall", "launch", "spawn", "comm", "compute", "sync")})
            v.pop("efficiency")
            out.append(RunResult(phases=phases, **v))
    return out


def summary_table(results: list[RunResult]) -> str:
    """One line per (scheduler, workers, duration), repeats averaged."""
    head = (f"{'sched':<9}{'W':>4}{'task(ms)':>11}{'wall(s)':>10}{'launch(s)':>11}"
            f"{'comm/task(ms)':>15}{'sync(ms)':>10}{'eff':>8}")
    lines = [head, "-" * len(head)]
    groups: dict[tuple, list[RunResult]] = defaultdict(list)
    for r in results:
        groups[(r.scheduler, r.workers, r.duration)].append(r)
    for (s, w, d), rs in sorted(groups.items()):
        m = lambda f: statistics.mean(f(r) for r in rs)  # noqa: E731
        err = " ERROR" if any(r.error for r in rs) else ""
        lines.append(
            f"{s:<9}{w:>4}{m(lambda r: r.ideal) * 1e3:>11.4f}{m(lambda r: r.phases.wall):>10.3f}"
            f"{m(lambda r: r.phases.launch):>11.3f}{m(lambda r: r.comm_per_task) * 1e3:>15.4f}"
            f"{m(lambda r: r.phases.sync) * 1e3:>10.3f}{m(lambda r: r.efficiency):>8.3f}{err}"
        )
    return "\n".join(lines)


def emit_report(results: list[RunResult], out_dir: str, calibration: SpinCalibration | None = None,
                config: SweepConfig | None = None) -> dict:
    """Write ``results.csv``, ``summary.txt`` and ``metg.json`` into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    write_rows(results, os.path.join(out_dir, "results.csv"))
    by_sched: dict[str, list[RunResult]] = defaultdict(list)
    for r in results:
        by_sched[r.scheduler].append(r)
    reports = {s: scaling_report(rs).to_dict() for s, rs in by_sched.items()}
    meta = {
        "schedulers": reports,
        "calibration": calibration.to_dict() if calibration else None,
        "config": {**asdict(config), "scheduler": config.scheduler.value} if config else None,
    }
    with open(os.path.join(out_dir, "metg.json"), "w") as f:
        json.dump(meta, f, indent=2)
    text = [summary_table(results), ""]
    for s, rep in reports.items():
        for w, metg in rep["metg_seconds"].items():
            if metg is None:
                text.append(f"METG {s} W={w}: unbracketed ({rep['notes'].get(w, '')})")
            else:
                flag = " (below smallest swept size)" if rep["below_swept_range"][w] else ""
                text.append(f"METG {s} W={w}: {metg * 1e3:.4f} ms{flag}")
        if "fit" in rep:
            fit = rep["fit"]
            text.append(f"{s} law: METG = {fit['slope'] * 1e3:.4f} ms x W, R2 = {fit['r2']:.3f}, "
                        f"monotonic = {fit['monotonic']}")
        if "constant" in rep:
            c = rep["constant"]
            text.append(f"{s} law: METG ~ {c['mean'] * 1e3:.2f} ms (spread {c['spread'] * 1e3:.2f} ms); "
                        f"script startup {c['spawn_per_task'] * 1e3:.2f} ms per task")
        for w, sy in rep.get("sync", {}).items():
            text.append(f"{s} sync W={w}: mean {sy['mean'] * 1e3:.3f} ms, "
                        f"range [{sy['min'] * 1e3:.3f}, {sy['max'] * 1e3:.3f}] ms")
    with open(os.path.join(out_dir, "summary.txt"), "w") as f:
        f.write("\n".join(text) + "\n")
    return meta
