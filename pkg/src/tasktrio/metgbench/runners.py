"""One measured run per scheduler.

Each runner executes ``workers * tasks_per_worker`` tasks of
``iterations`` spin kernels and returns a :class:`RunResult`. Times are
taken from the monotonic clock, which is shared by all local processes.
"""

from __future__ import annotations

import json
import logging
import operator
import os
import shlex
import statistics
import subprocess
import sys
import tempfile
import time
from pathlib import Path

from .. import kernels, wire
from ..dfm import Context, run_ranks
from ..hubd.client import HubClient
from ..pmake import MachineConfig, parse_rules, parse_targets, resolve_plan, schedule_run
from .model import PhaseBreakdown, RunResult, Scheduler

log = logging.getLogger(__name__)


def spin_payload(duration: float, iterations: int) -> str:
    return f"{duration * 1e6:.3f} {iterations}"


def ideal_task_seconds(duration: float, iterations: int, overhead: float = 0.0, repeats: int = 5) -> float:
    """Single-worker kernel time for one task, measured here and now."""
    runs = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        kernels.spin(max(duration - overhead, 0.0), iterations)
        runs.append(time.perf_counter() - t0)
    return statistics.median(runs)


# --- graph: hub plus worker processes --------------------------------------


class HubProcess:
    """A ``hubd serve`` subprocess on an ephemeral loopback port."""

    def __init__(self, *extra: str):
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "tasktrio.hubd", "serve", "--listen", "127.0.0.1:0", *extra],
            stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True,
        )
        line = self.proc.stdout.readline()
        if not line.startswith("listening on "):
            self.close()
            raise RuntimeError(f"hub did not start: {line!r}")
        self.address = line.split()[-1]

    def close(self) -> None:
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(10)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        if self.proc.stdout:
            self.proc.stdout.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _create_many(client: HubClient, msgs: list[wire.Message], window: int = 512) -> None:
    """Pipelined creates: send a window of frames, then read their answers."""
    for i in range(0, len(msgs), window):
        chunk = msgs[i : i + window]
        client.send_raw(b"".join(wire.encode(m) for m in chunk))
        for m in chunk:
            resp = client.recv()
            if not isinstance(resp, wire.OkResp):
                raise RuntimeError(f"create {m.task.name} failed: {resp}")


def spawn_workers(address: str, count: int, ready_dir: str, *, prefix="bench", prefetch=1,
                  overhead=0.0, idle_max=0.002, extra=()) -> list[subprocess.Popen]:
    return [
        subprocess.Popen(
            [sys.executable, "-m", "tasktrio.worker", "--hub", address, "--id", f"{prefix}.{i}",
             "--exec", "spin", "--json", "--prefetch", str(prefetch), "--idle-max", str(idle_max),
             "--ready-file", os.path.join(ready_dir, str(i)), "--spin-overhead", repr(overhead), *extra],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
        )
        for i in range(count)
    ]


def wait_ready(procs, ready_dir: str, timeout: float = 60.0) -> None:
    deadline = time.monotonic() + timeout
    while len(os.listdir(ready_dir)) < len(procs):
        dead = [p for p in procs if p.poll() is not None]
        if dead:
            raise RuntimeError(f"worker exited during startup: {dead[0].stderr.read()[-500:]}")
        if time.monotonic() > deadline:
            raise TimeoutError("workers did not become ready")
        time.sleep(0.002)


def collect_workers(procs, timeout: float = 600.0) -> list[dict]:
    summaries = []
    for p in procs:
        out, err = p.communicate(timeout=timeout)
        if p.returncode != 0:
            raise RuntimeError(f"worker failed ({p.returncode}): {err[-500:]}")
        summaries.append(json.loads(out.strip().splitlines()[-1]))
    return summaries


def run_graph(workers: int, duration: float, iterations: int, tasks_per_worker: int,
              repeat: int = 0, overhead: float = 0.0, prefetch: int = 1, hub_args=()) -> RunResult:
    """All tasks wait on a gate the harness holds until every worker is polling,
    so process startup is measured as ``spawn`` and kept out of the task window."""
    ntasks = workers * tasks_per_worker
    payload = spin_payload(duration, iterations)
    ideal = ideal_task_seconds(duration, iterations, overhead)
    with HubProcess(*hub_args) as hub, HubClient(hub.address) as client, \
            tempfile.TemporaryDirectory(prefix="metg-ready-") as ready:
        client.request(wire.CreateReq(wire.TaskSpec("gate", "")))
        gate = client.request(wire.StealReq("harness", 1))
        assert isinstance(gate, wire.TasksResp), gate
        _create_many(client, [wire.CreateReq(wire.TaskSpec(f"t{i}", payload), ("gate",))
                              for i in range(ntasks)])
        t_launch = time.monotonic()
        procs = spawn_workers(hub.address, workers, ready, prefetch=prefetch, overhead=overhead)
        try:
            wait_ready(procs, ready)
            t0 = time.monotonic()
            client.request(wire.CompleteReq("harness", "gate"))
            summaries = collect_workers(procs)
        finally:
            for p in procs:
                if p.poll() is None:
                    p.kill()
                    p.wait()
    executed = sum(s["executed"] for s in summaries)
    error = "" if executed == ntasks and all(s["failed"] == 0 for s in summaries) else \
        f"executed {executed} of {ntasks} tasks"
    ends = [s["t_end"] for s in summaries]
    wall = max(ends) - t_launch
    busy = min(ends) - t0
    compute = min(statistics.mean(s["compute_seconds"] for s in summaries), busy)
    phases = PhaseBreakdown(
        wall=wall, spawn=t0 - t_launch, launch=t0 - t_launch,
        compute=compute, comm=busy - compute, sync=max(ends) - min(ends),
    )
    rtt = statistics.mean(s["mean_steal_rtt"] for s in summaries)
    return RunResult("graph", workers, duration, iterations, ntasks, repeat, ideal, phases, rtt, error)


# --- bsp: thread ranks of the distributed list ----------------------------


def _bsp_rank(comm, ntasks: int, duration: float, iterations: int, delay: float):
    ctx = Context(comm)
    comm.barrier()
    t0 = time.monotonic()
    data = ctx.iterates(ntasks)
    work = data.map(lambda i: kernels.spin(duration, iterations))
    compute = sum(work.local)
    if ctx.rank == 0 and delay:
        time.sleep(delay)
    t_end = time.monotonic()
    work.reduce(operator.add, 0.0)  # the synchronising collective
    return t0, t_end, time.monotonic(), compute


def run_bsp(workers: int, duration: float, iterations: int, tasks_per_worker: int,
            repeat: int = 0, overhead: float = 0.0, delay: float = 0.0) -> RunResult:
    """Ranks are threads; ``delay`` seconds are added on rank 0 after its kernels."""
    ntasks = workers * tasks_per_worker
    ideal = ideal_task_seconds(duration, iterations, overhead)
    t_launch = time.monotonic()
    ranks = run_ranks(workers, _bsp_rank, ntasks, max(duration - overhead, 0.0), iterations, delay)
    t0 = max(r[0] for r in ranks)
    ends = [r[1] for r in ranks]
    wall = max(r[2] for r in ranks) - t_launch
    compute = statistics.mean(r[3] for r in ranks)
    phases = PhaseBreakdown(
        wall=wall, spawn=t0 - t_launch, launch=t0 - t_launch,
        compute=min(compute, wall), comm=0.0, sync=max(ends) - min(ends),
    )
    return RunResult("bsp", workers, duration, iterations, ntasks, repeat, ideal, phases)


# --- filemake: one shell script per task ----------------------------------

RULES = """\
task:
  resources: {{time: 1, nrs: 1}}
  out:
    done: "t{{n}}.done"
  script: |
    {{python}} -m tasktrio.kernels {usec:.3f} {iters}
    : > {{out[done]}}
"""

TARGETS = """\
bench:
  python: {python}
  loop:
    n: "range({ntasks})"
    tgt:
      done: "t{{n}}.done"
"""


def run_filemake(workers: int, duration: float, iterations: int, tasks_per_worker: int,
                 repeat: int = 0, overhead: float = 0.0, root: str | None = None) -> RunResult:
    """Every task is a shell script that starts Python to run the kernel, so
    the per-task startup is the scheduler's overhead (``spawn``)."""
    ntasks = workers * tasks_per_worker
    ideal = ideal_task_seconds(duration, iterations, overhead)
    usec = max(duration - overhead, 0.0) * 1e6
    with tempfile.TemporaryDirectory(prefix="metg-make-", dir=root) as tmp:
        rules = parse_rules(RULES.format(usec=usec, iters=iterations))
        targets = parse_targets(TARGETS.format(python=json.dumps(shlex.quote(sys.executable)), ntasks=ntasks))
        plan = resolve_plan(rules, targets, tmp)
        report = schedule_run(plan, MachineConfig(workers))
        nodes = list(report.nodes.values())
    failed = sum(1 for n in nodes if n["state"] != "done")
    error = f"{failed} of {ntasks} scripts failed" if failed else ""
    per_lane = ntasks / workers
    durations = [n["end"] - n["start"] for n in nodes if n["end"] is not None]
    startup = max(statistics.mean(durations) - ideal, 0.0) if durations else 0.0
    ends = sorted(n["end"] for n in nodes if n["end"] is not None)
    sync = ends[-1] - ends[-workers] if len(ends) >= workers else 0.0
    compute = ideal * per_lane
    spawn = startup * per_lane
    wall = report.wall
    phases = PhaseBreakdown(wall=wall, spawn=spawn, compute=compute, sync=sync,
                            comm=max(wall - spawn - compute - sync, 0.0), launch=0.0)
    return RunResult("filemake", workers, duration, iterations, ntasks, repeat, ideal, phases,
                     comm_per_task=startup, error=error)


RUNNERS = {Scheduler.GRAPH: run_graph, Scheduler.BSP: run_bsp, Scheduler.FILEMAKE: run_filemake}
