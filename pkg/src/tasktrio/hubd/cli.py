"""``hubd serve | relay | query``.

Query output is one ``key=value`` datum per line (tasks print as
``name<TAB>payload``). Exit status: 0 for ok/stat/tasks, 1 for an error
response, 2 for a network failure or bad usage, 3 for notfound, 4 when the
hub answers a steal with exit.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .. import wire
from .client import ENV_ADDR, HubClient, parse_address
from .relay import RelayConfig, relay
from .server import HubConfig, serve


def _print_response(resp: wire.Message, out=None) -> int:
    out = out or sys.stdout
    if isinstance(resp, wire.OkResp):
        print("ok", file=out)
        return 0
    if isinstance(resp, wire.StatResp):
        for state in wire.STATES:
            print(f"{state}={resp.counts.get(state, 0)}", file=out)
        print(f"total={resp.total}", file=out)
        print(f"deque={resp.deque}", file=out)
        print(f"assignments={resp.assignments}", file=out)
        print(f"workers={resp.workers}", file=out)
        print(f"stalled={int(resp.stalled)}", file=out)
        return 0
    if isinstance(resp, wire.TasksResp):
        for t in resp.tasks:
            print(f"{t.name}\t{t.payload}", file=out)
        return 0
    if isinstance(resp, wire.NotFoundResp):
        print("notfound", file=out)
        return 3
    if isinstance(resp, wire.ExitResp):
        print("exit", file=out)
        return 4
    if isinstance(resp, wire.ErrResp):
        print(f"error: {resp.message}", file=sys.stderr)
        return 1
    print(f"error: unexpected response {resp.KIND}", file=sys.stderr)
    return 1


def _query_message(args) -> wire.Message:
    if args.op == "create":
        spec = wire.TaskSpec(args.name, args.payload, args.originator)
        return wire.CreateReq(spec, tuple(args.deps))
    if args.op == "complete":
        return wire.CompleteReq(args.worker, args.name, not args.fail)
    if args.op == "exit":
        return wire.ExitReq(args.worker)
    if args.op == "stat":
        return wire.StatReq()
    if args.op == "steal":
        return wire.StealReq(args.worker, args.n)
    if args.op == "transfer":
        return wire.TransferReq(args.worker, args.name, tuple(args.deps))
    raise AssertionError(args.op)


def query(args) -> int:
    try:
        msg = _query_message(args)
        wire.encode(msg)
    except (ValueError, wire.EncodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        with HubClient(parse_address(args.hub), timeout=args.timeout) as client:
            resp = client.request(msg)
    except (OSError, ValueError, wire.WireError) as exc:
        print(f"error: cannot reach hub: {exc}", file=sys.stderr)
        return 2
    return _print_response(resp)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hubd", description="Task-graph hub, relay and query tool")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("serve", help="run the hub")
    s.add_argument("--listen", default="127.0.0.1:7117", metavar="H:P")
    s.add_argument("--snapshot", metavar="FILE")
    s.add_argument("--snapshot-interval", type=float, default=0.0, metavar="SECS")
    s.add_argument("--frame-cap", type=int, default=wire.DEFAULT_FRAME_CAP)
    s.add_argument("--delay", type=float, default=0.0, metavar="SECS",
                   help="add artificial latency to every response (testing)")

    r = sub.add_parser("relay", help="forward many clients over one hub connection")
    r.add_argument("--listen", required=True, metavar="H:P")
    r.add_argument("--upstream", required=True, metavar="H:P")

    q = sub.add_parser("query", help=f"send one request (hub from --hub or ${ENV_ADDR})")
    q.add_argument("--hub", metavar="H:P")
    q.add_argument("--timeout", type=float, default=30.0)
    qs = q.add_subparsers(dest="op", required=True)
    c = qs.add_parser("create")
    c.add_argument("name")
    c.add_argument("payload", nargs="?", default="")
    c.add_argument("deps", nargs="*")
    c.add_argument("--originator", default="dquery")
    c = qs.add_parser("complete")
    c.add_argument("worker")
    c.add_argument("name")
    g = c.add_mutually_exclusive_group()
    g.add_argument("--ok", action="store_true", default=True)
    g.add_argument("--fail", action="store_true")
    c = qs.add_parser("exit")
    c.add_argument("worker")
    qs.add_parser("stat")
    c = qs.add_parser("steal")
    c.add_argument("worker")
    c.add_argument("-n", type=int, default=1)
    c = qs.add_parser("transfer")
    c.add_argument("worker")
    c.add_argument("name")
    c.add_argument("deps", nargs="*")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose or args.cmd != "query" else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    if args.cmd == "query":
        return query(args)
    try:
        if args.cmd == "serve":
            cfg = HubConfig(args.listen, args.snapshot, args.snapshot_interval, args.frame_cap, args.delay)
            serve(cfg, ready_file=sys.stdout)
        else:
            relay(RelayConfig(args.listen, args.upstream), ready_file=sys.stdout)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
