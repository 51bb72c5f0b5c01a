"""File-directed parallel make.

Rules map input file templates to output templates; targets name the files
wanted. :func:`resolve_plan` chains backwards from targets to a DAG of rule
instances, :func:`priority` weights each by the node-hours it and everything
downstream will consume, and :func:`schedule_run` greedily launches the most
important runnable instance that fits in the node budget.
"""

from .model import (
    Loop,
    ParseError,
    PmakeError,
    ResourceSet,
    Rule,
    Target,
    UnsupportedIterable,
    expand_iterable,
    parse_rules,
    parse_targets,
)
from .plan import (
    AmbiguousRule,
    CyclicPlan,
    MachineConfig,
    NodeState,
    NoRuleForFile,
    Plan,
    PlanNode,
    UnboundPlaceholder,
    machine_preset,
    priority,
    resolve_plan,
    substitute,
)
from .run import LocalRunner, MissingDeclaredOutput, RunReport, schedule_run

__all__ = [
    "AmbiguousRule", "CyclicPlan", "LocalRunner", "Loop", "MachineConfig", "MissingDeclaredOutput",
    "NoRuleForFile", "NodeState", "ParseError", "Plan", "PlanNode", "PmakeError", "ResourceSet",
    "Rule", "RunReport", "Target", "UnboundPlaceholder", "UnsupportedIterable", "expand_iterable",
    "machine_preset", "parse_rules", "parse_targets", "priority", "resolve_plan", "schedule_run",
    "substitute",
]
