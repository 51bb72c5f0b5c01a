"""Backward chaining from target files to a DAG of rule instances."""

from __future__ import annotations

import enum
import itertools
import os
import re
import shlex
import string
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .model import PmakeError, ResourceSet, Rule, Target


class NoRuleForFile(PmakeError):
    pass


class AmbiguousRule(PmakeError):
    pass


class CyclicPlan(PmakeError):
    pass


class UnboundPlaceholder(PmakeError, KeyError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(key)

    def __str__(self) -> str:
        return f"unbound placeholder {{{self.key}}}"


class NodeState(str, enum.Enum):
    PENDING = "pending"
    RUNNABLE = "runnable"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"
    SKIPPED = "skipped"


class _StrictFormatter(string.Formatter):
    """``str.format`` restricted to names and ``[key]`` lookups."""

    def get_field(self, field_name, args, kwargs):
        if "." in field_name.split("[", 1)[0] or re.search(r"\]\.", field_name):
            raise PmakeError(f"attribute access is not allowed in {{{field_name}}}")
        try:
            return super().get_field(field_name, args, kwargs)
        except (KeyError, IndexError):
            raise UnboundPlaceholder(field_name) from None

    def check_unused_args(self, used_args, args, kwargs):
        pass


_FMT = _StrictFormatter()


def fill(template: str, namespace: dict[str, Any]) -> str:
    """Brace substitution; ``{{`` and ``}}`` stand for literal braces."""
    return _FMT.vformat(template, (), namespace)


@dataclass
class MachineConfig:
    total_nodes: int = 1
    launcher_template: str = ""
    flavor: str = "local"

    def __post_init__(self):
        if self.total_nodes < 1:
            raise ValueError("total_nodes must be >= 1")

    def launcher(self, res: ResourceSet) -> str:
        return fill(self.launcher_template, {
            "nrs": res.nrs, "cpu": res.cpu, "gpu": res.gpu, "ranks": res.ranks,
            "ntasks": res.nrs * res.ranks,
        })


MACHINE_PRESETS = {
    "local": "",
    "slurm": "srun -n {ntasks} -c {cpu} --gpus-per-task={gpu}",
    "lsf": "jsrun -n {nrs} -a {ranks} -c {cpu} -g {gpu}",
}


def machine_preset(flavor: str, total_nodes: int = 1) -> MachineConfig:
    try:
        return MachineConfig(total_nodes, MACHINE_PRESETS[flavor], flavor)
    except KeyError:
        raise ValueError(f"unknown machine {flavor!r}; choose from {', '.join(MACHINE_PRESETS)}") from None


@dataclass(eq=False)
class PlanNode:
    id: str
    rule: Rule
    target: Target
    binding: dict[str, Any]
    inputs: list[str]
    outputs: list[str]
    namespace: dict[str, Any]
    state: NodeState = NodeState.PENDING
    priority: float = 0.0
    deps: set[str] = field(default_factory=set)
    succs: set[str] = field(default_factory=set)
    # filled in by the runner
    start: float | None = None
    end: float | None = None
    exit_code: int | None = None
    error: str = ""

    @property
    def resources(self) -> ResourceSet:
        return self.rule.resources

    @property
    def dirname(self) -> str:
        return self.target.dirname

    @property
    def basename(self) -> str:
        """``rule.n``, or just ``rule`` without a template variable."""
        return self.id.rsplit("/", 1)[-1]


@dataclass
class Plan:
    nodes: dict[str, PlanNode] = field(default_factory=dict)
    root: str = "."

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, node_id: str) -> PlanNode:
        return self.nodes[node_id]

    def add_edge(self, producer: str, consumer: str) -> None:
        self.nodes[producer].succs.add(consumer)
        self.nodes[consumer].deps.add(producer)

    def by_state(self, state: NodeState) -> list[PlanNode]:
        return [n for n in self.nodes.values() if n.state is state]

    def topological(self) -> list[str]:
        indeg = {k: len(n.deps) for k, n in self.nodes.items()}
        queue = deque(sorted(k for k, d in indeg.items() if d == 0))
        order = []
        while queue:
            k = queue.popleft()
            order.append(k)
            for s in sorted(self.nodes[k].succs):
                indeg[s] -= 1
                if indeg[s] == 0:
                    queue.append(s)
        if len(order) != len(self.nodes):
            stuck = sorted(k for k, d in indeg.items() if d > 0)
            raise CyclicPlan(f"dependency cycle among {stuck[:6]}")
        return order


# --- matching -------------------------------------------------------------


def _template_regex(template: str) -> re.Pattern:
    parts = []
    seen = set()
    for literal, fname, _, _ in string.Formatter().parse(template):
        parts.append(re.escape(literal))
        if fname is None:
            continue
        if fname in seen:
            parts.append(f"(?P={fname})")
        else:
            seen.add(fname)
            parts.append(f"(?P<{fname}>.+?)")
    return re.compile("^" + "".join(parts) + "$")


@dataclass
class _CompiledRule:
    rule: Rule
    patterns: list[re.Pattern]

    def match(self, path: str) -> dict[str, str] | None:
        for pat in self.patterns:
            m = pat.match(path)
            if m:
                return m.groupdict()
        return None


def _products(variables: dict[str, list]) -> Iterable[dict[str, Any]]:
    names = list(variables)
    for combo in itertools.product(*(variables[n] for n in names)):
        yield dict(zip(names, combo))


def target_files(target: Target) -> list[str]:
    """Files a target demands: its ``out`` list plus every loop expansion."""
    ns = dict(target.attrs, dirname=target.dirname)
    files = [fill(t, ns) for t in target.out.values()]
    if target.loop is not None:
        for values in _products(target.loop.vars):
            files.extend(fill(t, {**ns, **values}) for t in target.loop.templates.values())
    return list(dict.fromkeys(files))


def _rule_namespace(rule: Rule, target: Target, binding: dict[str, Any]) -> tuple[dict, list[str], list[str]]:
    """Substitution steps i to iii; returns (namespace, inputs, outputs)."""
    ns: dict[str, Any] = dict(target.attrs)
    ns["dirname"] = target.dirname
    ns["out"] = dict(target.out)
    ns.update(binding)
    inp = {k: fill(t, ns) for k, t in rule.inp.items()}
    inputs = list(inp.values())
    if rule.loop is not None:
        for name, tpl in rule.loop.templates.items():
            files = [fill(tpl, {**ns, **values}) for values in _products(rule.loop.vars)]
            inp[name] = " ".join(files)
            inputs.extend(files)
    out = {k: fill(t, ns) for k, t in rule.out.items()}
    ns["inp"] = inp
    ns["out"] = out
    ns["setup"] = fill(rule.setup, ns)
    return ns, list(dict.fromkeys(inputs)), list(out.values())


def resolve_plan(
    rules: list[Rule],
    targets: list[Target],
    root: str | os.PathLike = ".",
    exists: Callable[[str], bool] | None = None,
) -> Plan:
    """Backward-chain from every target file to the rule instances that make it.

    A demanded file matching no rule must already exist. A matched rule
    instance whose outputs all exist is ``skipped`` and its inputs are not
    searched further; otherwise each input is demanded in turn.
    """
    root = os.fspath(root)
    exists = exists or os.path.exists
    compiled = [_CompiledRule(r, [_template_regex(t) for t in r.out.values()]) for r in rules]
    plan = Plan(root=root)
    owner: dict[str, str] = {}
    visiting: set[str] = set()

    def full(target: Target, rel: str) -> str:
        return os.path.normpath(os.path.join(root, target.dirname, rel))

    def demand(target: Target, rel: str) -> str | None:
        hits = [(c.rule, b) for c in compiled if (b := c.match(rel)) is not None]
        if not hits:
            if exists(full(target, rel)):
                return None
            raise NoRuleForFile(f"no rule makes {os.path.join(target.dirname, rel)!r} and it does not exist")
        if len(hits) > 1:
            names = ", ".join(r.name for r, _ in hits)
            raise AmbiguousRule(f"{os.path.join(target.dirname, rel)!r} matches rules {names}")
        rule, binding = hits[0]
        base = rule.name + "".join(f".{v}" for v in binding.values())
        nid = os.path.normpath(os.path.join(target.dirname, base)).replace(os.sep, "/")
        if nid in visiting:
            raise CyclicPlan(f"{nid} depends on its own output {rel!r}")
        if nid in plan.nodes:
            return nid
        ns, inputs, outputs = _rule_namespace(rule, target, binding)
        node = PlanNode(nid, rule, target, binding, inputs, outputs, ns)
        for f in outputs:
            key = full(target, f)
            if owner.setdefault(key, nid) != nid:
                raise AmbiguousRule(f"{key!r} is produced by both {owner[key]} and {nid}")
        plan.nodes[nid] = node
        if all(exists(full(target, f)) for f in outputs):
            node.state = NodeState.SKIPPED
            return nid
        visiting.add(nid)
        for f in inputs:
            producer = demand(target, f)
            if producer is not None:
                plan.add_edge(producer, nid)
        visiting.discard(nid)
        return nid

    for target in targets:
        for f in target_files(target):
            demand(target, f)
    return plan


def priority(plan: Plan) -> dict[str, float]:
    """Own node-hours plus those of every transitive successor, each counted once."""
    order = plan.topological()
    below: dict[str, set[str]] = {}
    for k in reversed(order):
        acc: set[str] = set()
        for s in plan.nodes[k].succs:
            acc.add(s)
            acc |= below[s]
        below[k] = acc
    out = {}
    for k in order:
        node = plan.nodes[k]
        node.priority = node.resources.node_hours + sum(plan.nodes[s].resources.node_hours for s in below[k])
        out[k] = node.priority
    return out


def substitute(node: PlanNode, machine: MachineConfig | None = None, root: str = ".") -> str:
    """Render the node's shell script (step iv on top of the node namespace)."""
    machine = machine or MachineConfig()
    ns = dict(node.namespace)
    ns["mpirun"] = machine.launcher(node.resources)
    body = fill(node.rule.script, ns)
    workdir = os.path.abspath(os.path.join(root, node.dirname))
    parts = ["set -e", f"cd {shlex.quote(workdir)}"]
    if ns["setup"].strip():
        parts.append(ns["setup"].rstrip("\n"))
    parts.append(body.rstrip("\n"))
    return "\n".join(parts) + "\n"
