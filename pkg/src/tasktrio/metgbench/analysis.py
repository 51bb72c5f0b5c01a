"""From runs to efficiency curves, METG values and scaling fits."""

from __future__ import annotations

import statistics
from collections import defaultdict
from dataclasses import dataclass, field

from .model import CurvePoint, MetgResult, RunResult

SUPER_IDEAL_TOLERANCE = 0.05


class Unbracketed(ValueError):
    """The sweep never reached 50% efficiency (or has too few points)."""


def curve(runs: list[RunResult]) -> list[CurvePoint]:
    """Mean over repeats per duration, ordered by task size.

    A failed run contributes efficiency 0 to its duration.
    """
    by_d: dict[float, list[RunResult]] = defaultdict(list)
    for r in runs:
        by_d[r.duration].append(r)
    points = []
    for d in sorted(by_d):
        rs = by_d[d]
        eff = statistics.mean(r.efficiency for r in rs)
        ideal = statistics.mean(r.ideal for r in rs)
        points.append(CurvePoint(ideal, eff, eff > 1 + SUPER_IDEAL_TOLERANCE))
    return points


def compute_metg(points: list[CurvePoint]) -> MetgResult:
    """Task size at which efficiency first reaches 50%, by linear interpolation.

    If the smallest task size already reaches 50% the result is that size,
    flagged ``below``. Raises :class:`Unbracketed` when 50% is never reached.
    """
    pts = sorted(points, key=lambda p: p.task_ideal_seconds)
    if len(pts) < 2:
        raise Unbracketed("need at least two curve points")
    for i, p in enumerate(pts):
        if p.efficiency >= 0.5:
            if i == 0:
                return MetgResult(p.task_ideal_seconds, below=True, bracket=[p])
            a = pts[i - 1]
            frac = (0.5 - a.efficiency) / (p.efficiency - a.efficiency)
            metg = a.task_ideal_seconds + frac * (p.task_ideal_seconds - a.task_ideal_seconds)
            return MetgResult(metg, bracket=[a, p])
    best = max(p.efficiency for p in pts)
    raise Unbracketed(f"efficiency never reaches 0.5 (best {best:.3f}); sweep larger task sizes")


@dataclass
class LineFit:
    slope: float
    r2: float
    monotonic: bool


def fit_through_origin(xs: list[float], ys: list[float]) -> LineFit:
    """Least squares ``y = s x``; R² is measured against the mean of ``y``,
    so a flat series scores poorly even though the line passes the origin."""
    sxx = sum(x * x for x in xs)
    slope = sum(x * y for x, y in zip(xs, ys)) / sxx
    mean = statistics.mean(ys)
    ss_res = sum((y - slope * x) ** 2 for x, y in zip(xs, ys))
    ss_tot = sum((y - mean) ** 2 for y in ys)
    r2 = 1 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    order = [y for _, y in sorted(zip(xs, ys))]
    return LineFit(slope, r2, all(b > a for a, b in zip(order, order[1:])))


@dataclass
class ScalingReport:
    scheduler: str
    metg: dict[int, MetgResult | None] = field(default_factory=dict)
    notes: dict[int, str] = field(default_factory=dict)
    fit: LineFit | None = None  # graph
    mean: float | None = None  # filemake
    spread: float | None = None  # filemake
    spawn_per_task: float | None = None  # filemake
    sync: dict[int, dict[str, float]] = field(default_factory=dict)  # bsp
    comm_per_task: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "scheduler": self.scheduler,
            "metg_seconds": {str(w): (m.metg_seconds if m else None) for w, m in self.metg.items()},
            "below_swept_range": {str(w): bool(m and m.below) for w, m in self.metg.items()},
            "notes": {str(w): n for w, n in self.notes.items()},
            "comm_per_task": {str(w): v for w, v in self.comm_per_task.items()},
        }
        if self.fit is not None:
            out["fit"] = {"law": "metg = slope * workers", "slope": self.fit.slope,
                          "r2": self.fit.r2, "monotonic": self.fit.monotonic}
        if self.mean is not None:
            out["constant"] = {"mean": self.mean, "spread": self.spread,
                               "spawn_per_task": self.spawn_per_task}
        if self.sync:
            out["sync"] = {str(w): v for w, v in self.sync.items()}
        return out


def scaling_report(runs: list[RunResult]) -> ScalingReport:
    """METG per worker count plus the scheduler's expected law.

    graph: METG proportional to workers (slope and R² of a through-origin
    fit); filemake: constant (mean and spread, next to the measured
    per-script startup); bsp: the slowest-minus-fastest distribution.
    Fits need three or more worker counts; poor fits are reported as is.
    """
    if not runs:
        raise ValueError("no runs")
    sched = runs[0].scheduler
    by_w: dict[int, list[RunResult]] = defaultdict(list)
    for r in runs:
        if r.scheduler != sched:
            raise ValueError("runs from more than one scheduler")
        by_w[r.workers].append(r)
    rep = ScalingReport(sched)
    for w in sorted(by_w):
        rep.comm_per_task[w] = statistics.mean(r.comm_per_task for r in by_w[w])
        try:
            rep.metg[w] = compute_metg(curve(by_w[w]))
        except Unbracketed as exc:
            rep.metg[w] = None
            rep.notes[w] = str(exc)
        syncs = [r.phases.sync for r in by_w[w]]
        if sched == "bsp":
            rep.sync[w] = {"mean": statistics.mean(syncs), "min": min(syncs), "max": max(syncs)}
    known = {w: m.metg_seconds for w, m in rep.metg.items() if m is not None}
    if sched == "graph" and len(known) >= 3:
        rep.fit = fit_through_origin(list(known), list(known.values()))
    if sched == "filemake" and known:
        vals = list(known.values())
        rep.mean = statistics.mean(vals)
        rep.spread = max(vals) - min(vals)
        rep.spawn_per_task = statistics.mean(r.comm_per_task for r in runs)
    return rep
