"""Pull-based worker: steal tasks from a hub, run them, report back.

With ``prefetch_depth`` >= 1 the worker runs two activities: the calling
thread talks to the hub, and an executor thread runs payloads one at a time.
The communicator keeps up to ``1 + prefetch_depth`` tasks handed out, so the
next steal round trip overlaps the current task. ``prefetch_depth == 0`` is
the strict steal-run-report loop.

Execution is at-least-once: a worker that exits (or is declared exited with
``hubd query exit``) has its unfinished tasks returned to the hub.
"""

from __future__ import annotations

import argparse
import enum
import json
import logging
import os
import queue
import shlex
import socket
import statistics
import subprocess
import sys
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Protocol

from . import wire
from .hubd.client import ENV_ADDR, HubClient, parse_address
from .kernels import spin

log = logging.getLogger(__name__)


class Outcome(enum.Enum):
    OK = "ok"
    TASK_ERROR = "task_error"
    FATAL = "fatal"


class Executor(Protocol):
    def run(self, payload: str) -> Outcome: ...

    def diagnose(self) -> bool:
        """True when the worker itself is healthy."""
        ...


class ShellExecutor:
    """Runs each payload with ``/bin/sh -c``; exit status 0 is success."""

    def __init__(self, shell: str = "/bin/sh", cwd: str | None = None):
        self.shell = shell
        self.cwd = cwd

    def run(self, payload: str) -> Outcome:
        try:
            proc = subprocess.run([self.shell, "-c", payload], cwd=self.cwd)
        except OSError as exc:
            log.error("cannot spawn %s: %s", self.shell, exc)
            return Outcome.FATAL
        return Outcome.OK if proc.returncode == 0 else Outcome.TASK_ERROR

    def diagnose(self) -> bool:
        try:
            return subprocess.run([self.shell, "-c", "true"], cwd=self.cwd).returncode == 0
        except OSError:
            return False


def shell_executor(**kwargs) -> ShellExecutor:
    return ShellExecutor(**kwargs)


def parse_spin_payload(payload: str) -> tuple[float, int]:
    """``"<microseconds> <iterations>"`` to ``(seconds, iterations)``."""
    parts = payload.split()
    if len(parts) not in (1, 2):
        raise ValueError(f"bad spin payload {payload!r}")
    micros = float(parts[0])
    iters = int(parts[1]) if len(parts) == 2 else 1
    if micros < 0 or iters < 0 or micros != micros:
        raise ValueError(f"bad spin payload {payload!r}")
    return micros * 1e-6, iters


class SpinExecutor:
    """Busy-spins the CPU for ``microseconds * iterations``.

    ``overhead`` (seconds per kernel call, from calibration) is subtracted
    from each iteration so short requests are not inflated by call cost.
    """

    def __init__(self, overhead: float = 0.0):
        self.overhead = overhead

    def run(self, payload: str) -> Outcome:
        try:
            seconds, iters = parse_spin_payload(payload)
        except ValueError:
            return Outcome.TASK_ERROR
        spin(max(seconds - self.overhead, 0.0), iters)
        return Outcome.OK

    def diagnose(self) -> bool:
        return True


def spin_executor(calibration=None) -> SpinExecutor:
    overhead = getattr(calibration, "overhead", calibration) or 0.0
    return SpinExecutor(float(overhead))


@dataclass
class PipelineConfig:
    prefetch_depth: int = 1
    batch_n: int = 1
    idle_backoff: tuple[float, float] = (0.001, 0.25)
    reconnect_attempts: int = 5

    def __post_init__(self):
        if self.prefetch_depth < 0:
            raise ValueError("prefetch_depth must be >= 0")
        if self.batch_n < 1:
            raise ValueError("batch_n must be >= 1")
        lo, hi = self.idle_backoff
        if not 0 < lo <= hi:
            raise ValueError("idle_backoff must satisfy 0 < initial <= max")


class Backoff:
    """Doubling wait between ``initial`` and ``maximum``; ``reset`` on progress."""

    def __init__(self, initial: float, maximum: float):
        self.initial = initial
        self.maximum = maximum
        self._next = initial

    def reset(self) -> None:
        self._next = self.initial

    def next(self) -> float:
        wait = self._next
        self._next = min(self._next * 2, self.maximum)
        return wait


@dataclass
class WorkerSummary:
    worker: str
    executed: int = 0
    succeeded: int = 0
    failed: int = 0
    returned: int = 0  # prefetched tasks handed back at shutdown
    exit_reason: str = ""
    t_start: float = 0.0
    t_first_task: float | None = None
    t_last_task: float | None = None
    t_end: float = 0.0
    compute_seconds: float = 0.0
    idle_seconds: float = 0.0
    steal_rtts: list[float] = field(default_factory=list)

    @property
    def mean_steal_rtt(self) -> float:
        return sum(self.steal_rtts) / len(self.steal_rtts) if self.steal_rtts else 0.0

    @property
    def median_steal_rtt(self) -> float:
        return statistics.median(self.steal_rtts) if self.steal_rtts else 0.0

    def to_json(self) -> str:
        d = asdict(self)
        d["mean_steal_rtt"] = self.mean_steal_rtt
        d["median_steal_rtt"] = self.median_steal_rtt
        del d["steal_rtts"]
        return json.dumps(d)


class HubUnreachable(ConnectionError):
    pass


def default_worker_id() -> str:
    return f"{socket.gethostname()}.{os.getpid()}"


class _Link:
    """One hub connection with bounded reconnects.

    :meth:`post` queues a request whose answer is not needed right away
    (completion reports). Posted frames travel in the same write as the next
    :meth:`request`, and their answers are read back in order before that
    request's own answer, so reporting costs no extra round trip.
    """

    def __init__(self, address, attempts: int):
        self.client = HubClient(address)
        self.attempts = attempts
        self.unsent: list[bytes] = []
        self.awaiting: list[wire.Message] = []

    def post(self, msg: wire.Message) -> None:
        self.unsent.append(wire.encode(msg))
        self.awaiting.append(msg)

    def flush(self) -> None:
        """Send posted requests now (their answers are still read later)."""
        if self.unsent:
            self._retrying(self._send_unsent)

    def sync(self) -> None:
        """Send posted requests and consume their answers."""
        if self.awaiting:
            self._retrying(self._exchange, None)

    def request(self, msg: wire.Message) -> wire.Message:
        return self._retrying(self._exchange, msg)

    def _send_unsent(self) -> None:
        data = b"".join(self.unsent)
        self.unsent.clear()
        self.client.send_raw(data)

    def _exchange(self, msg: wire.Message | None) -> wire.Message | None:
        if msg is not None:
            self.unsent.append(wire.encode(msg))
        self._send_unsent()
        while self.awaiting:
            req = self.awaiting[0]
            resp = self.client.recv()
            self.awaiting.pop(0)
            if isinstance(resp, wire.ErrResp):
                log.warning("hub rejected %s: %s", req.KIND, resp.message)
        return self.client.recv() if msg is not None else None

    def _retrying(self, fn, *args):
        delay = 0.05
        for attempt in range(self.attempts + 1):
            try:
                if not self.client.connected:
                    self.client.connect()
                    # whatever was in flight may or may not have been applied;
                    # resend it (a duplicate report is rejected and logged)
                    self.unsent = [wire.encode(m) for m in self.awaiting]
                return fn(*args)
            except OSError as exc:
                self.client.close()
                if attempt == self.attempts:
                    raise HubUnreachable(f"hub unreachable after {attempt} retries: {exc}") from exc
                log.warning("hub connection failed (%s); retrying in %.2fs", exc, delay)
                time.sleep(delay)
                delay = min(delay * 2, 2.0)
        raise AssertionError("unreachable")

    def close(self) -> None:
        try:
            self.sync()
        except HubUnreachable as exc:
            log.error("could not deliver %d queued reports: %s", len(self.awaiting), exc)
        finally:
            self.client.close()


class _Run:
    def __init__(self, address, worker_id, executor, cfg, stop, on_ready=None):
        self.link = _Link(address, cfg.reconnect_attempts)
        self.on_ready = on_ready
        self.id = worker_id
        self.exec = executor
        self.cfg = cfg
        self.stop = stop or threading.Event()
        self.summary = WorkerSummary(worker_id, t_start=time.monotonic())
        self.backoff = Backoff(*cfg.idle_backoff)

    def steal(self) -> wire.Message:
        t0 = time.perf_counter()
        resp = self.link.request(wire.StealReq(self.id, self.cfg.batch_n))
        self.summary.steal_rtts.append(time.perf_counter() - t0)
        if self.on_ready is not None:
            self.on_ready()
            self.on_ready = None
        if isinstance(resp, wire.ErrResp):
            raise RuntimeError(f"hub rejected steal: {resp.message}")
        return resp

    def execute(self, task: wire.TaskSpec) -> Outcome:
        t0 = time.monotonic()
        s = self.summary
        if s.t_first_task is None:
            s.t_first_task = t0
        elif s.t_last_task is not None:
            s.idle_seconds += t0 - s.t_last_task
        try:
            outcome = self.exec.run(task.payload)
        except Exception:
            log.exception("executor raised on task %s", task.name)
            outcome = Outcome.TASK_ERROR
        t1 = time.monotonic()
        s.compute_seconds += t1 - t0
        s.t_last_task = t1
        return outcome

    def report(self, task: wire.TaskSpec, outcome: Outcome) -> bool:
        """Tell the hub how ``task`` went; False means this worker must exit."""
        s = self.summary
        s.executed += 1
        if outcome is Outcome.TASK_ERROR and self.exec.diagnose():
            s.failed += 1
            self._complete(task, False)
            return True
        if outcome is not Outcome.OK:
            s.exit_reason = "fatal" if outcome is Outcome.FATAL else "diagnose-failed"
            log.error("worker %s unhealthy after task %s; informing hub of exit", self.id, task.name)
            self.link.request(wire.ExitReq(self.id))
            return False
        s.succeeded += 1
        self._complete(task, True)
        return True

    def _complete(self, task: wire.TaskSpec, ok: bool) -> None:
        self.link.post(wire.CompleteReq(self.id, task.name, ok))

    def give_back(self, tasks) -> None:
        # Each transfer lands at the serving end, so hand back newest first
        # to keep the original order there.
        for t in reversed(tasks):
            self.link.request(wire.TransferReq(self.id, t.name, ()))
            self.summary.returned += 1

    # --- strict loop ------------------------------------------------------

    def run_serial(self) -> None:
        while True:
            if self.stop.is_set():
                self.summary.exit_reason = "stopped"
                return
            resp = self.steal()
            if isinstance(resp, wire.ExitResp):
                self.summary.exit_reason = "hub-exit"
                return
            if isinstance(resp, wire.NotFoundResp):
                self.stop.wait(self.backoff.next())
                continue
            self.backoff.reset()
            tasks = list(resp.tasks)
            while tasks:
                task = tasks.pop(0)
                if not self.report(task, self.execute(task)):
                    return
                if self.stop.is_set():
                    self.give_back(tasks)
                    break
                self.link.flush()

    # --- pipelined loop ---------------------------------------------------

    def run_pipelined(self) -> None:
        todo: queue.Queue = queue.Queue()
        done: queue.Queue = queue.Queue()

        def executor_loop():
            while True:
                task = todo.get()
                if task is None:
                    return
                done.put((task, self.execute(task)))

        thread = threading.Thread(target=executor_loop, name=f"exec-{self.id}", daemon=True)
        thread.start()
        capacity = 1 + self.cfg.prefetch_depth
        inflight = 0
        exhausted = False
        try:
            while True:
                wait = None
                if not exhausted and not self.stop.is_set() and inflight < capacity:
                    resp = self.steal()
                    if isinstance(resp, wire.TasksResp):
                        self.backoff.reset()
                        for t in resp.tasks:
                            todo.put(t)
                        inflight += len(resp.tasks)
                        continue
                    if isinstance(resp, wire.ExitResp):
                        exhausted = True
                    else:
                        wait = self.backoff.next()
                if self.stop.is_set() and inflight:
                    inflight -= self._drain_todo(todo)
                if inflight == 0:
                    if exhausted or self.stop.is_set():
                        self.summary.exit_reason = "hub-exit" if exhausted else "stopped"
                        return
                    self.stop.wait(wait or 0)
                    continue
                self.link.flush()
                try:
                    first = done.get(timeout=wait)
                except queue.Empty:
                    continue
                results = [first]
                while True:
                    try:
                        results.append(done.get_nowait())
                    except queue.Empty:
                        break
                for task, outcome in results:
                    inflight -= 1
                    if not self.report(task, outcome):
                        self._drain_todo(todo, give_back=False)
                        return
        finally:
            todo.put(None)
            thread.join(timeout=None if self.summary.exit_reason != "unreachable" else 0)

    def _drain_todo(self, todo: queue.Queue, give_back: bool = True) -> int:
        pulled = []
        while True:
            try:
                t = todo.get_nowait()
            except queue.Empty:
                break
            if t is not None:
                pulled.append(t)
        if give_back:
            self.give_back(pulled)
        return len(pulled)


def run_loop(
    hub_address,
    worker_id: str | None = None,
    executor: Executor | None = None,
    cfg: PipelineConfig | None = None,
    stop: threading.Event | None = None,
    on_ready=None,
) -> WorkerSummary:
    """Steal, execute and report until the hub says exit (or ``stop`` is set).

    ``on_ready`` is called once, after the hub answers the first request.
    """
    run = _Run(
        hub_address,
        worker_id or default_worker_id(),
        executor or ShellExecutor(),
        cfg or PipelineConfig(),
        stop,
        on_ready,
    )
    try:
        if run.cfg.prefetch_depth == 0:
            run.run_serial()
        else:
            run.run_pipelined()
    except HubUnreachable as exc:
        log.error("%s; aborting (recover with `hubd query exit %s`)", exc, run.id)
        run.summary.exit_reason = "unreachable"
    finally:
        run.link.close()
        run.summary.t_end = time.monotonic()
    return run.summary


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="worker", description="Pull tasks from a hub and run them")
    p.add_argument("--hub", metavar="H:P", help=f"hub or relay address (default ${ENV_ADDR})")
    p.add_argument("--id", dest="worker_id", help="worker id (default hostname.pid)")
    p.add_argument("--prefetch", type=int, default=1)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--exec", dest="executor", choices=("shell", "spin"), default="shell")
    p.add_argument("--idle-max", type=float, default=0.25, metavar="SEC",
                   help="longest wait between polls while no task is ready (default 0.25)")
    p.add_argument("--ready-file", metavar="PATH", help="create PATH once the hub has answered")
    p.add_argument("--spin-overhead", type=float, default=0.0, help=argparse.SUPPRESS)
    p.add_argument("--json", action="store_true", help="print the run summary as JSON")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        address = parse_address(args.hub)
        cfg = PipelineConfig(prefetch_depth=args.prefetch, batch_n=args.batch,
                             idle_backoff=(min(0.001, args.idle_max), args.idle_max))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    executor = ShellExecutor() if args.executor == "shell" else SpinExecutor(args.spin_overhead)
    stop = threading.Event()
    try:
        ready = (lambda: open(args.ready_file, "a").close()) if args.ready_file else None
        summary = run_loop(address, args.worker_id, executor, cfg, stop, ready)
    except KeyboardInterrupt:
        return 130
    if args.json:
        print(summary.to_json(), flush=True)
    else:
        print(
            f"{summary.worker}: executed={summary.executed} succeeded={summary.succeeded} "
            f"failed={summary.failed} exit={summary.exit_reason}",
            file=sys.stderr,
        )
    return 0 if summary.exit_reason in ("hub-exit", "stopped") else 1


if __name__ == "__main__":
    sys.exit(main())
