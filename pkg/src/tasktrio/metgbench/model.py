from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field


class Scheduler(str, enum.Enum):
    GRAPH = "graph"
    BSP = "bsp"
    FILEMAKE = "filemake"


DEFAULT_ITERS = {Scheduler.GRAPH: 256, Scheduler.FILEMAKE: 256, Scheduler.BSP: 1}


@dataclass
class SweepConfig:
    """One sweep: every ``workers`` count times every kernel duration.

    ``durations`` are per-iteration spin times in seconds; a task runs
    ``iterations_per_task`` of them.
    """

    scheduler: Scheduler
    workers: list[int]
    durations: list[float]
    tasks_per_worker: int = 1024
    iterations_per_task: int | None = None
    repeats: int = 1
    prefetch_depth: int = 1
    bsp_delay: float = 0.0  # extra seconds injected on rank 0 (bsp only)

    def __post_init__(self):
        self.scheduler = Scheduler(self.scheduler)
        if self.iterations_per_task is None:
            self.iterations_per_task = DEFAULT_ITERS[self.scheduler]
        if not self.workers or any(w < 1 for w in self.workers):
            raise ValueError("workers must be a non-empty list of counts >= 1")
        if not self.durations or any(d < 0 for d in self.durations):
            raise ValueError("durations must be a non-empty list of values >= 0")
        if any(b <= a for a, b in zip(self.durations, self.durations[1:])):
            raise ValueError("durations must be strictly increasing")
        if self.repeats < 1 or self.tasks_per_worker < 1 or self.iterations_per_task < 1:
            raise ValueError("repeats, tasks_per_worker and iterations_per_task must be >= 1")
        if self.bsp_delay < 0:
            raise ValueError("bsp_delay must be >= 0")


@dataclass
class PhaseBreakdown:
    """Seconds of one run's wall clock, by cause.

    ``spawn`` is startup: process launch for graph and bsp (``launch`` is
    the same one-time figure), per-task script startup for filemake
    (where ``launch`` is 0). ``comm`` is time in the scheduler outside the
    kernel, ``sync`` the spread between the first and the last worker to
    finish.
    """

    wall: float
    spawn: float = 0.0
    comm: float = 0.0
    compute: float = 0.0
    sync: float = 0.0
    launch: float = 0.0

    @property
    def attributed(self) -> float:
        return self.spawn + self.comm + self.compute + self.sync


@dataclass
class RunResult:
    scheduler: str
    workers: int
    duration: float  # per-iteration spin seconds requested
    iterations: int
    tasks: int
    repeat: int
    ideal: float  # single-worker seconds per task, measured
    phases: PhaseBreakdown
    comm_per_task: float = 0.0
    error: str = ""

    @property
    def per_task(self) -> float:
        """Wall per task per worker, one-time launch excluded."""
        return (self.phases.wall - self.phases.launch) * self.workers / self.tasks

    @property
    def efficiency(self) -> float:
        if self.error:
            return 0.0
        return self.ideal / self.per_task if self.per_task > 0 else 0.0

    def row(self) -> dict:
        d = asdict(self)
        ph = d.pop("phases")
        d.update({k: ph[k] for k in ("wall", "launch", "spawn", "comm", "compute", "sync")})
        d["efficiency"] = self.efficiency
        return d


ROW_FIELDS = [
    "scheduler", "workers", "duration", "iterations", "tasks", "repeat", "ideal",
    "wall", "launch", "spawn", "comm", "compute", "sync", "comm_per_task", "efficiency", "error",
]


@dataclass
class CurvePoint:
    task_ideal_seconds: float
    efficiency: float
    super_ideal: bool = False  # efficiency above 1 + tolerance


@dataclass
class MetgResult:
    metg_seconds: float
    below: bool = False  # every point already at >= 50%: true METG is smaller
    bracket: list[CurvePoint] = field(default_factory=list)
