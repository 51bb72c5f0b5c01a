"""Greedy, node-budgeted execution of a resolved plan."""

from __future__ import annotations

import logging
import os
import queue
import subprocess
import threading
import time
from dataclasses import dataclass, field
from typing import Protocol

from .plan import MachineConfig, NodeState, Plan, PlanNode, priority, substitute

log = logging.getLogger(__name__)


class MissingDeclaredOutput(Exception):
    pass


class Runner(Protocol):
    def start(self, node: PlanNode, script: str) -> None: ...

    def wait(self) -> tuple[str, int]:
        """Block until some started node exits; return ``(node id, status)``."""
        ...


class LocalRunner:
    """Writes ``<rule>.<n>.sh`` into the target directory and runs it with
    ``/bin/sh``, output going to ``<rule>.<n>.log``. One reaper thread per
    child reports exits on a queue, so no polling interval skews timings."""

    def __init__(self, root: str = ".", shell: str = "/bin/sh"):
        self.root = root
        self.shell = shell
        self.exits: queue.Queue = queue.Queue()

    def paths(self, node: PlanNode) -> tuple[str, str]:
        d = os.path.join(self.root, node.dirname)
        return os.path.join(d, node.basename + ".sh"), os.path.join(d, node.basename + ".log")

    def start(self, node: PlanNode, script: str) -> None:
        sh, logfile = self.paths(node)
        os.makedirs(os.path.dirname(sh) or ".", exist_ok=True)
        with open(sh, "w") as f:
            f.write(script)
        with open(logfile, "wb") as out:
            proc = subprocess.Popen([self.shell, sh], stdout=out, stderr=subprocess.STDOUT,
                                    stdin=subprocess.DEVNULL)
        threading.Thread(target=lambda: self.exits.put((node.id, proc.wait())), daemon=True).start()

    def wait(self) -> tuple[str, int]:
        return self.exits.get()


@dataclass
class RunReport:
    nodes: dict[str, dict] = field(default_factory=dict)
    start_order: list[str] = field(default_factory=list)
    max_concurrent_nrs: int = 0
    wall: float = 0.0

    @property
    def spawned(self) -> int:
        return len(self.start_order)

    def count(self, state: NodeState) -> int:
        return sum(1 for n in self.nodes.values() if n["state"] == state.value)

    @property
    def ok(self) -> bool:
        return self.count(NodeState.FAILED) == 0

    def summary(self) -> str:
        parts = [f"{s.value}={self.count(s)}" for s in NodeState if self.count(s)]
        return f"{self.spawned} spawned; " + " ".join(parts) + f"; wall {self.wall:.3f}s"


def _fail_closure(plan: Plan, root: PlanNode, reason: str) -> None:
    stack = list(root.succs)
    while stack:
        n = plan.nodes[stack.pop()]
        if n.state in (NodeState.PENDING, NodeState.RUNNABLE):
            n.state = NodeState.FAILED
            n.error = f"upstream failure: {reason}"
            stack.extend(n.succs)


def schedule_run(
    plan: Plan,
    machine: MachineConfig,
    runner: Runner | None = None,
    exists=None,
) -> RunReport:
    """Run every pending node, highest priority first, within ``machine.total_nodes``.

    A node becomes runnable once all its producers are done (or skipped).
    Whenever nodes fit in the free budget the highest-priority one starts;
    ties go to the lexicographically smaller node id. A nonzero exit, or a
    zero exit that leaves a declared output missing, fails the node and
    every node downstream of it.
    """
    exists = exists or os.path.exists
    runner = runner or LocalRunner(plan.root)
    priority(plan)
    todo = [n for n in plan.nodes.values() if n.state is not NodeState.SKIPPED]
    too_big = [n.id for n in todo if n.resources.nrs > machine.total_nodes]
    if too_big:
        raise ValueError(f"nodes need more than {machine.total_nodes} nodes: {too_big[:5]}")

    def path(node: PlanNode, rel: str) -> str:
        return os.path.join(plan.root, node.dirname, rel)

    report = RunReport()
    free = machine.total_nodes
    running: dict[str, PlanNode] = {}
    t0 = time.monotonic()
    finished = {NodeState.DONE, NodeState.SKIPPED}
    while True:
        for n in todo:
            if n.state is NodeState.PENDING and all(plan.nodes[d].state in finished for d in n.deps):
                n.state = NodeState.RUNNABLE
        while True:
            fits = [n for n in todo if n.state is NodeState.RUNNABLE and n.resources.nrs <= free]
            if not fits:
                break
            # rounding keeps ties that are exact in real arithmetic exact here
            node = min(fits, key=lambda n: (-round(n.priority, 9), n.id))
            missing = [f for f in node.inputs if not exists(path(node, f))]
            if missing:
                node.state = NodeState.FAILED
                node.error = f"inputs missing at launch: {missing}"
                _fail_closure(plan, node, node.error)
                continue
            script = substitute(node, machine, plan.root)
            node.state = NodeState.RUNNING
            node.start = time.monotonic() - t0
            free -= node.resources.nrs
            running[node.id] = node
            report.start_order.append(node.id)
            report.max_concurrent_nrs = max(report.max_concurrent_nrs, machine.total_nodes - free)
            log.info("start %s (priority %.3f, nrs %d)", node.id, node.priority, node.resources.nrs)
            runner.start(node, script)
        if not running:
            break
        nid, status = runner.wait()
        node = running.pop(nid)
        free += node.resources.nrs
        node.end = time.monotonic() - t0
        node.exit_code = status
        if status == 0:
            missing = [f for f in node.outputs if not exists(path(node, f))]
            if missing:
                node.error = str(MissingDeclaredOutput(f"{node.id} exited 0 without {missing}"))
            else:
                node.state = NodeState.DONE
        else:
            node.error = f"exit status {status}"
        if node.state is not NodeState.DONE:
            node.state = NodeState.FAILED
            log.warning("%s failed: %s", node.id, node.error)
            _fail_closure(plan, node, node.id)
    report.wall = time.monotonic() - t0
    for n in plan.nodes.values():
        report.nodes[n.id] = {
            "state": n.state.value, "priority": n.priority, "start": n.start, "end": n.end,
            "exit_code": n.exit_code, "error": n.error,
        }
    return report
