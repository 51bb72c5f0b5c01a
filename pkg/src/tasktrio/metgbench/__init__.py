"""Minimum effective task granularity (METG) sweeps for the three schedulers.

Efficiency at a task size is the single-worker kernel time per task
divided by the measured wall time per task per worker; METG is the task
size where efficiency reaches one half.
"""

from .analysis import LineFit, ScalingReport, Unbracketed, compute_metg, curve, fit_through_origin, scaling_report
from .calibrate import SpinCalibration, UnstableCalibration, calibrate_spin
from .model import CurvePoint, MetgResult, PhaseBreakdown, RunResult, Scheduler, SweepConfig
from .report import emit_report, read_rows, run_sweep, summary_table, write_rows
from .runners import run_bsp, run_filemake, run_graph

__all__ = [
    "LineFit", "ScalingReport", "Unbracketed", "compute_metg", "curve", "fit_through_origin", "scaling_report",
    "SpinCalibration", "UnstableCalibration", "calibrate_spin",
    "CurvePoint", "MetgResult", "PhaseBreakdown", "RunResult", "Scheduler", "SweepConfig",
    "emit_report", "read_rows", "run_sweep", "summary_table", "write_rows",
    "run_bsp", "run_filemake", "run_graph",
]
