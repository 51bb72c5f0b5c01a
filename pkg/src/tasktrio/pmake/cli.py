"""``pmake --rules rules.yaml --targets targets.yaml``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .model import PmakeError, parse_rules, parse_targets
from .plan import MACHINE_PRESETS, NodeState, machine_preset, priority, resolve_plan, substitute
from .run import schedule_run


def print_plan(plan, machine, out=None) -> None:
    out = out or sys.stdout
    order = sorted(plan.nodes.values(), key=lambda n: (n.state is NodeState.SKIPPED, -n.priority, n.id))
    for n in order:
        deps = ",".join(sorted(n.deps)) or "-"
        print(f"{n.id}\t{n.state.value}\tpriority={n.priority:.6g}\tnrs={n.resources.nrs}\tafter={deps}", file=out)
    runnable = [n for n in order if n.state is not NodeState.SKIPPED]
    if runnable:
        first = runnable[0]
        print(f"# script for {first.id}:", file=out)
        print(substitute(first, machine, plan.root), end="", file=out)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="pmake", description="Run rule instances needed to build target files")
    p.add_argument("--rules", type=Path, default=Path("rules.yaml"))
    p.add_argument("--targets", type=Path, default=Path("targets.yaml"))
    p.add_argument("--nodes", type=int, default=1, help="node budget shared by running rules")
    p.add_argument("--machine", choices=sorted(MACHINE_PRESETS), default="local")
    p.add_argument("--root", type=Path, default=Path("."), help="directory target dirnames are relative to")
    p.add_argument("--dry-run", action="store_true", help="print the plan with priorities and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        machine = machine_preset(args.machine, args.nodes)
        plan = resolve_plan(parse_rules(args.rules), parse_targets(args.targets), args.root)
        priority(plan)
        if args.dry_run:
            print_plan(plan, machine)
            return 0
        report = schedule_run(plan, machine)
    except (PmakeError, OSError, ValueError) as exc:
        print(f"pmake: {exc}", file=sys.stderr)
        return 2
    for nid, info in report.nodes.items():
        if info["state"] == NodeState.FAILED.value:
            print(f"pmake: {nid} failed: {info['error']}", file=sys.stderr)
    print(report.summary())
    return 0 if report.ok else 1


if __name__ == "__main__":
    sys.exit(main())
