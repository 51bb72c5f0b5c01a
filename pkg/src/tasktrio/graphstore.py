"""The hub's task database: join counters, successor lists and a ready deque.

Two persistent tables (task metadata and dependency entries) are the source
of truth; the ready deque and the worker assignment map are run-time state
that :meth:`GraphStore.restore` rebuilds from the tables.

The deque is served from its left end. Tasks that become ready normally are
appended on the right, so workers receive the oldest ready task first;
tasks returned by ``transfer`` (with satisfied dependencies) or recovered
from an exited worker are pushed on the left and served next.

All methods assume one caller at a time; the hub serializes requests.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator

from .wire import (
    CompleteReq,
    CreateReq,
    ErrResp,
    ExitReq,
    ExitResp,
    Message,
    NotFoundResp,
    OkResp,
    StatReq,
    StatResp,
    StealReq,
    TaskSpec,
    TasksResp,
    TransferReq,
)

SNAPSHOT_FORMAT = "tasktrio-graph"
SNAPSHOT_VERSION = 1


class TaskState(str, enum.Enum):
    WAITING = "waiting"
    READY = "ready"
    ASSIGNED = "assigned"
    DONE = "done"
    ERRORED = "errored"


class StoreError(Exception):
    pass


class DuplicateName(StoreError):
    pass


class UnknownDependency(StoreError):
    pass


class NotAssigned(StoreError):
    pass


class CorruptSnapshot(StoreError):
    pass


@dataclass
class DepEntry:
    join_counter: int = 0
    successors: list[str] = field(default_factory=list)


@dataclass
class TaskRecord:
    spec: TaskSpec
    state: TaskState
    assigned_to: str | None = None


def _unique(names: Iterable[str]) -> list[str]:
    return list(dict.fromkeys(names))


class GraphStore:
    def __init__(self) -> None:
        self.tasks: dict[str, TaskRecord] = {}
        self.deps: dict[str, DepEntry] = {}
        self.ready: deque[str] = deque()
        # worker -> insertion-ordered set of task names
        self.assignments: dict[str, dict[str, None]] = {}
        self._counts = {s: 0 for s in TaskState}

    def __len__(self) -> int:
        return len(self.tasks)

    def _set(self, rec: TaskRecord, state: TaskState) -> None:
        self._counts[rec.state] -= 1
        self._counts[state] += 1
        rec.state = state

    def _check_known(self, names: list[str]) -> None:
        missing = [d for d in names if d not in self.tasks]
        if missing:
            raise UnknownDependency(f"unknown dependencies: {', '.join(missing)}")

    def _holder(self, worker: str, task: str) -> TaskRecord:
        rec = self.tasks.get(task)
        if rec is None or rec.state is not TaskState.ASSIGNED or rec.assigned_to != worker:
            raise NotAssigned(f"task {task!r} is not assigned to worker {worker!r}")
        return rec

    def _unassign(self, worker: str, rec: TaskRecord) -> None:
        held = self.assignments[worker]
        del held[rec.spec.name]
        if not held:
            del self.assignments[worker]
        rec.assigned_to = None

    def _wire_deps(self, name: str, deps: list[str]) -> tuple[int, bool]:
        """Register ``name`` under each unfinished dep; return (pending, any_errored)."""
        pending = 0
        errored = False
        for d in deps:
            st = self.tasks[d].state
            if st is TaskState.DONE:
                continue
            pending += 1
            errored = errored or st is TaskState.ERRORED
            self.deps[d].successors.append(name)
        return pending, errored

    def _propagate_error(self, root: str) -> list[str]:
        hit = []
        stack = list(self.deps[root].successors)
        while stack:
            name = stack.pop()
            rec = self.tasks[name]
            if rec.state is TaskState.WAITING:
                self._set(rec, TaskState.ERRORED)
                hit.append(name)
                stack.extend(self.deps[name].successors)
        return hit

    # --- operations -------------------------------------------------------

    def create(self, spec: TaskSpec, deps: Iterable[str] = ()) -> TaskState:
        name = spec.name
        if not name:
            raise ValueError("task name must be non-empty")
        if name in self.tasks:
            raise DuplicateName(f"task {name!r} already exists")
        deps = _unique(deps)
        self._check_known(deps)
        rec = TaskRecord(spec, TaskState.WAITING)
        self.tasks[name] = rec
        self._counts[TaskState.WAITING] += 1
        pending, errored = self._wire_deps(name, deps)
        self.deps[name] = DepEntry(pending)
        if errored:
            self._set(rec, TaskState.ERRORED)
        elif not pending:
            self._set(rec, TaskState.READY)
            self.ready.append(name)
        return rec.state

    def steal(self, worker: str, n: int = 1) -> TasksResp | NotFoundResp | ExitResp:
        if n < 1:
            raise ValueError("steal count must be positive")
        if not self.ready:
            if self._counts[TaskState.WAITING]:
                return NotFoundResp()
            return ExitResp()
        held = self.assignments.setdefault(worker, {})
        out = []
        for _ in range(min(n, len(self.ready))):
            name = self.ready.popleft()
            rec = self.tasks[name]
            self._set(rec, TaskState.ASSIGNED)
            rec.assigned_to = worker
            held[name] = None
            out.append(rec.spec)
        return TasksResp(tuple(out))

    def complete(self, worker: str, task: str, ok: bool = True) -> list[str]:
        """Finish an assigned task.

        Returns the names that changed state as a consequence: successors made
        ready when ``ok``, or the transitively errored successors otherwise.
        """
        rec = self._holder(worker, task)
        self._unassign(worker, rec)
        if not ok:
            self._set(rec, TaskState.ERRORED)
            return self._propagate_error(task)
        self._set(rec, TaskState.DONE)
        woken = []
        for s in self.deps[task].successors:
            entry = self.deps[s]
            entry.join_counter -= 1
            srec = self.tasks[s]
            if entry.join_counter == 0 and srec.state is TaskState.WAITING:
                self._set(srec, TaskState.READY)
                self.ready.append(s)
                woken.append(s)
        return woken

    def transfer(self, worker: str, task: str, new_deps: Iterable[str] = ()) -> TaskState:
        """Hand an assigned task back with extra dependencies.

        No cycle check is made: depending on one's own successor leaves the
        task waiting forever, which ``stats().stalled`` reports.
        """
        rec = self._holder(worker, task)
        new_deps = _unique(new_deps)
        self._check_known(new_deps)
        self._unassign(worker, rec)
        pending, errored = self._wire_deps(task, new_deps)
        self.deps[task].join_counter = pending
        if errored:
            self._set(rec, TaskState.ERRORED)
            self._propagate_error(task)
        elif pending:
            self._set(rec, TaskState.WAITING)
        else:
            self._set(rec, TaskState.READY)
            self.ready.appendleft(task)
        return rec.state

    def exit_worker(self, worker: str) -> list[str]:
        """Return every task held by ``worker`` to the serving end of the deque."""
        held = self.assignments.pop(worker, None)
        if not held:
            return []
        names = list(held)
        for name in reversed(names):
            rec = self.tasks[name]
            rec.assigned_to = None
            self._set(rec, TaskState.READY)
            self.ready.appendleft(name)
        return names

    def stats(self) -> StatResp:
        return StatResp(
            {s.value: c for s, c in self._counts.items()},
            deque=len(self.ready),
            assignments=sum(len(h) for h in self.assignments.values()),
            workers=len(self.assignments),
        )

    def apply(self, req: Message) -> Message:
        """Run one wire request and return its response message."""
        try:
            if isinstance(req, StealReq):
                return self.steal(req.worker, req.n)
            if isinstance(req, CreateReq):
                self.create(req.task, req.deps)
            elif isinstance(req, CompleteReq):
                self.complete(req.worker, req.task, req.ok)
            elif isinstance(req, TransferReq):
                self.transfer(req.worker, req.task, req.new_deps)
            elif isinstance(req, ExitReq):
                self.exit_worker(req.worker)
            elif isinstance(req, StatReq):
                return self.stats()
            else:
                return ErrResp(f"not a request: {type(req).__name__}")
        except (StoreError, ValueError) as exc:
            return ErrResp(f"{type(exc).__name__}: {exc}")
        return OkResp()

    # --- introspection ----------------------------------------------------

    def state(self, name: str) -> TaskState:
        return self.tasks[name].state

    def join_counter(self, name: str) -> int:
        return self.deps[name].join_counter

    def successors(self, name: str) -> list[str]:
        return list(self.deps[name].successors)

    def assigned(self, worker: str) -> list[str]:
        return list(self.assignments.get(worker, ()))

    def tables(self) -> dict[str, tuple]:
        """The persistent tables as comparable values, assignments collapsed."""
        return {
            name: (
                rec.spec,
                _persisted(rec.state),
                self.deps[name].join_counter,
                tuple(self.deps[name].successors),
            )
            for name, rec in self.tasks.items()
        }

    # --- persistence ------------------------------------------------------

    def _snapshot_lines(self) -> Iterator[str]:
        header = {"format": SNAPSHOT_FORMAT, "version": SNAPSHOT_VERSION, "tasks": len(self.tasks)}
        yield json.dumps(header, sort_keys=True) + "\n"
        for name, rec in self.tasks.items():
            entry = self.deps[name]
            row = {
                "name": name,
                "payload": rec.spec.payload,
                "originator": rec.spec.originator,
                "state": _persisted(rec.state).value,
                "join_counter": entry.join_counter,
                "successors": entry.successors,
            }
            yield json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n"

    def snapshot(self, sink: str | os.PathLike | IO[str]) -> None:
        """Write both tables; a path is replaced atomically."""
        body = "".join(self._snapshot_lines()).encode("utf-8")
        trailer = json.dumps({"sha256": hashlib.sha256(body).hexdigest()}) + "\n"
        data = body.decode("utf-8") + trailer
        if isinstance(sink, (str, os.PathLike)):
            path = Path(sink)
            tmp = path.with_name(path.name + ".tmp")
            with open(tmp, "w", encoding="utf-8") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        else:
            sink.write(data)

    @classmethod
    def restore(cls, source: str | os.PathLike | IO[str]) -> GraphStore:
        if isinstance(source, (str, os.PathLike)):
            with open(source, "rb") as fh:
                raw = fh.read()
        else:
            text = source.read()
            raw = text.encode("utf-8") if isinstance(text, str) else text
        return cls._from_bytes(raw)

    @classmethod
    def _from_bytes(cls, raw: bytes) -> GraphStore:
        if not raw.endswith(b"\n"):
            raise CorruptSnapshot("snapshot is truncated")
        cut = raw.rfind(b"\n", 0, len(raw) - 1) + 1
        body, trailer = raw[:cut], raw[cut:]
        try:
            digest = json.loads(trailer)["sha256"]
        except (ValueError, KeyError, TypeError) as exc:
            raise CorruptSnapshot(f"bad trailer: {exc}") from exc
        if hashlib.sha256(body).hexdigest() != digest:
            raise CorruptSnapshot("checksum mismatch")
        try:
            lines = body.decode("utf-8").splitlines()
            header = json.loads(lines[0])
            if header.get("format") != SNAPSHOT_FORMAT or header.get("version") != SNAPSHOT_VERSION:
                raise CorruptSnapshot(f"unsupported snapshot header {header!r}")
            rows = [json.loads(line) for line in lines[1:]]
        except (ValueError, IndexError, AttributeError) as exc:
            raise CorruptSnapshot(f"unparsable snapshot: {exc}") from exc
        if header.get("tasks") != len(rows):
            raise CorruptSnapshot("task count does not match header")

        store = cls()
        try:
            for row in rows:
                name = row["name"]
                persisted = TaskState(row["state"])
                jc = row["join_counter"]
                if persisted is TaskState.ASSIGNED or not isinstance(jc, int) or jc < 0:
                    raise CorruptSnapshot(f"bad row for {name!r}")
                if name in store.tasks:
                    raise CorruptSnapshot(f"duplicate task {name!r}")
                if persisted in (TaskState.DONE, TaskState.ERRORED):
                    state = persisted
                else:
                    state = TaskState.READY if jc == 0 else TaskState.WAITING
                spec = TaskSpec(name, row.get("payload", ""), row.get("originator", ""))
                store.tasks[name] = TaskRecord(spec, state)
                store._counts[state] += 1
                store.deps[name] = DepEntry(jc, list(row["successors"]))
                if state is TaskState.READY:
                    store.ready.append(name)
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptSnapshot(f"bad snapshot row: {exc}") from exc
        for name, entry in store.deps.items():
            for s in entry.successors:
                if s not in store.tasks:
                    raise CorruptSnapshot(f"{name!r} lists unknown successor {s!r}")
        return store


def _persisted(state: TaskState) -> TaskState:
    return TaskState.READY if state is TaskState.ASSIGNED else state
