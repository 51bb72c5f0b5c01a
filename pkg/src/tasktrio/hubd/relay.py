"""Message-forwarding relay: many downstream connections over one upstream.

Each downstream request is wrapped in an :class:`~tasktrio.wire.Envelope`
whose ``client_tag`` identifies where the answer must go. A relay may itself
sit behind another relay: an incoming envelope keeps its own tag, and the
pair (downstream connection, incoming tag) is mapped onto a fresh local tag,
so any depth of forwarding tree works with plain integer tags.

The relay holds no task state. If the upstream connection drops, every
downstream connection is closed; clients reconnect and the hub's assignment
map (plus ``exit``) covers recovery.
"""

from __future__ import annotations

import asyncio
import itertools
import logging
import signal
import socket
from dataclasses import dataclass

from .. import wire
from ..kernels import scan_frames
from .client import format_address, parse_address
from .server import _LoopThread

log = logging.getLogger(__name__)


@dataclass
class RelayConfig:
    listen_address: str
    upstream_address: str
    frame_cap: int = wire.DEFAULT_FRAME_CAP

    def __post_init__(self):
        if parse_address(self.listen_address) == parse_address(self.upstream_address):
            raise ValueError("relay cannot listen on its own upstream address")


def _nodelay(transport) -> None:
    sock = transport.get_extra_info("socket")
    if sock is not None and sock.family in (socket.AF_INET, socket.AF_INET6):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)


class _Downstream(asyncio.Protocol):
    def __init__(self, relay: Relay):
        self.relay = relay
        self.conn_id = next(relay._conn_ids)
        self.buf = bytearray()
        self.transport = None
        self.tags: dict[int | None, int] = {}

    def connection_made(self, transport):
        self.transport = transport
        _nodelay(transport)
        self.relay.downstream[self.conn_id] = self
        self.relay.ensure_upstream()

    def connection_lost(self, exc):
        self.relay.downstream.pop(self.conn_id, None)
        for tag in self.tags.values():
            self.relay.routes.pop(tag, None)

    def fail(self, message: str) -> None:
        self.transport.write(wire.encode(wire.ErrResp(message)))
        self.transport.close()

    def data_received(self, data):
        if self.transport.is_closing():
            return
        buf = self.buf
        buf += data
        spans, pos, oversize = scan_frames(buf, 0, self.relay.config.frame_cap)
        out = []
        for begin, end in spans:
            try:
                item = wire.decode_body(buf[begin:end])
            except wire.Malformed as exc:
                self.relay.send_upstream(out)
                self.fail(f"Malformed: {exc}")
                return
            if isinstance(item, wire.Envelope):
                orig, msg = item.client_tag, item.body
            else:
                orig, msg = None, item
            tag = self.tags.get(orig)
            if tag is None:
                tag = self.relay.new_tag(self, orig)
                self.tags[orig] = tag
            out.append(wire.encode(wire.Envelope(tag, msg), self.relay.config.frame_cap))
        del buf[:pos]
        self.relay.send_upstream(out)
        if oversize:
            self.fail(f"Malformed: frame of {oversize} octets exceeds cap")


class _Upstream(asyncio.Protocol):
    def __init__(self, relay: Relay):
        self.relay = relay
        self.buf = bytearray()
        self.transport = None

    def connection_made(self, transport):
        self.transport = transport
        _nodelay(transport)

    def connection_lost(self, exc):
        self.relay.upstream_lost(self)

    def data_received(self, data):
        buf = self.buf
        buf += data
        spans, pos, oversize = scan_frames(buf, 0, self.relay.config.frame_cap)
        batches: dict[_Downstream, list[bytes]] = {}
        routes = self.relay.routes
        for begin, end in spans:
            item = wire.decode_body(buf[begin:end])
            if not isinstance(item, wire.Envelope):
                log.error("upstream sent an untagged %s; dropping", item.KIND)
                continue
            route = routes.get(item.client_tag)
            if route is None:
                continue  # downstream already gone
            conn, orig = route
            frame = item.body if orig is None else wire.Envelope(orig, item.body)
            batches.setdefault(conn, []).append(wire.encode(frame, self.relay.config.frame_cap))
        del buf[:pos]
        for conn, frames in batches.items():
            if not conn.transport.is_closing():
                conn.transport.write(b"".join(frames))
        if oversize:
            self.transport.close()


class Relay:
    def __init__(self, config: RelayConfig):
        self.config = config
        self.downstream: dict[int, _Downstream] = {}
        self.routes: dict[int, tuple[_Downstream, int | None]] = {}
        self._conn_ids = itertools.count()
        self._tags = itertools.count(1)
        self._upstream: _Upstream | None = None
        self._connecting: asyncio.Task | None = None
        self._pending: list[bytes] = []
        self._server = None
        self.address: tuple[str, int] | None = None

    def new_tag(self, conn: _Downstream, orig: int | None) -> int:
        tag = next(self._tags) & wire.MAX_CTAG
        self.routes[tag] = (conn, orig)
        return tag

    async def start(self) -> tuple[str, int]:
        await self._connect_upstream()
        host, port = parse_address(self.config.listen_address)
        loop = asyncio.get_running_loop()
        self._server = await loop.create_server(lambda: _Downstream(self), host, port, reuse_address=True)
        self.address = self._server.sockets[0].getsockname()[:2]
        return self.address

    async def _connect_upstream(self) -> None:
        host, port = parse_address(self.config.upstream_address)
        loop = asyncio.get_running_loop()
        _, proto = await loop.create_connection(lambda: _Upstream(self), host, port)
        self._upstream = proto
        if self._pending:
            proto.transport.write(b"".join(self._pending))
            self._pending.clear()

    def ensure_upstream(self) -> None:
        if self._upstream is not None or self._connecting is not None:
            return

        async def reconnect():
            try:
                await self._connect_upstream()
            except OSError as exc:
                log.warning("upstream %s unreachable: %s", self.config.upstream_address, exc)
                self._pending.clear()
                self._drop_downstream()
            finally:
                self._connecting = None

        self._connecting = asyncio.get_running_loop().create_task(reconnect())

    def send_upstream(self, frames: list[bytes]) -> None:
        if not frames:
            return
        if self._upstream is None:
            self._pending.extend(frames)
            self.ensure_upstream()
        else:
            self._upstream.transport.write(b"".join(frames))

    def upstream_lost(self, proto: _Upstream) -> None:
        if proto is not self._upstream:
            return
        log.warning("upstream connection lost; closing %d downstream connections", len(self.downstream))
        self._upstream = None
        self._drop_downstream()

    def _drop_downstream(self) -> None:
        for conn in list(self.downstream.values()):
            conn.transport.close()
        self.routes.clear()

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            self._drop_downstream()
            await self._server.wait_closed()
        if self._upstream is not None:
            up, self._upstream = self._upstream, None
            up.transport.close()


def relay(config: RelayConfig, ready_file=None) -> None:
    """Run a relay until SIGINT/SIGTERM."""

    async def main():
        r = Relay(config)
        addr = await r.start()
        line = f"listening on {format_address(addr)}"
        log.info("%s, forwarding to %s", line, config.upstream_address)
        if ready_file is not None:
            print(line, file=ready_file, flush=True)
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        await stop.wait()
        await r.stop()

    asyncio.run(main())


class RelayThread(_LoopThread):
    def __init__(self, config: RelayConfig):
        super().__init__()
        self.relay = Relay(config)

    @property
    def address(self) -> tuple[str, int]:
        return self.relay.address

    @property
    def address_text(self) -> str:
        return format_address(self.relay.address)

    def start(self) -> RelayThread:
        self._start(self.relay.start())
        return self

    def stop(self) -> None:
        self._stop(self.relay.stop())

    def __enter__(self) -> RelayThread:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
