"""The hub service: one :class:`GraphStore` behind the framed wire protocol.

Connections are handled by asyncio protocols on a single event loop, which
makes the loop the one serialized applier: each decoded request runs to
completion against the store before the next is looked at, and responses
are written back on the requesting connection in request order.
"""

from __future__ import annotations

import asyncio
import logging
import signal
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path

from .. import wire
from ..graphstore import GraphStore
from ..kernels import scan_frames
from .client import format_address, parse_address

log = logging.getLogger(__name__)


@dataclass
class HubConfig:
    listen_address: str = "127.0.0.1:0"
    snapshot_path: str | None = None
    snapshot_interval: float = 0.0
    frame_cap: int = wire.DEFAULT_FRAME_CAP
    # Artificial latency added before every response; a test shim for
    # emulating a distant hub on loopback.
    response_delay: float = 0.0

    def __post_init__(self):
        if self.snapshot_interval < 0:
            raise ValueError("snapshot_interval must be >= 0")
        if self.response_delay < 0:
            raise ValueError("response_delay must be >= 0")


class _Conn(asyncio.Protocol):
    def __init__(self, hub: Hub):
        self.hub = hub
        self.buf = bytearray()
        self.transport: asyncio.Transport | None = None
        self.outbox: deque[tuple[float, bytes, bool]] = deque()
        self.closing = False

    def connection_made(self, transport):
        self.transport = transport
        sock = transport.get_extra_info("socket")
        if sock is not None and sock.family in (socket.AF_INET, socket.AF_INET6):
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.hub.conns.add(self)

    def connection_lost(self, exc):
        self.hub.conns.discard(self)

    def data_received(self, data):
        if self.closing:
            return
        buf = self.buf
        buf += data
        spans, pos, oversize = scan_frames(buf, 0, self.hub.config.frame_cap)
        apply = self.hub.store.apply
        out = []
        for begin, end in spans:
            try:
                item = wire.decode_body(buf[begin:end])
            except wire.Malformed as exc:
                out.append(wire.encode(wire.ErrResp(f"Malformed: {exc}")))
                self._emit(out, close=True)
                return
            if isinstance(item, wire.Envelope):
                resp = wire.Envelope(item.client_tag, apply(item.body))
            else:
                resp = apply(item)
            out.append(wire.encode(resp, self.hub.config.frame_cap))
        self.hub.requests += len(spans)
        del buf[:pos]
        if oversize:
            out.append(wire.encode(wire.ErrResp(f"Malformed: frame of {oversize} octets exceeds cap")))
            self._emit(out, close=True)
            return
        if out:
            self._emit(out)

    def _emit(self, out: list[bytes], close: bool = False) -> None:
        data = b"".join(out)
        delay = self.hub.config.response_delay
        if close:
            self.closing = True
        if delay <= 0:
            self.transport.write(data)
            if close:
                self.transport.close()
            return
        loop = asyncio.get_running_loop()
        due = loop.time() + delay
        self.outbox.append((due, data, close))
        loop.call_at(due, self._flush)

    def _flush(self) -> None:
        now = asyncio.get_running_loop().time()
        while self.outbox and self.outbox[0][0] <= now:
            _, data, close = self.outbox.popleft()
            if self.transport.is_closing():
                continue
            self.transport.write(data)
            if close:
                self.transport.close()


class Hub:
    def __init__(self, config: HubConfig, store: GraphStore | None = None):
        self.config = config
        if store is None and config.snapshot_path and Path(config.snapshot_path).exists():
            store = GraphStore.restore(config.snapshot_path)
            log.info("restored %d tasks from %s", len(store), config.snapshot_path)
        self.store = store if store is not None else GraphStore()
        self.conns: set[_Conn] = set()
        self.requests = 0
        self._server: asyncio.base_events.Server | None = None
        self._snap_handle: asyncio.TimerHandle | None = None
        self.address: tuple[str, int] | None = None

    async def start(self) -> tuple[str, int]:
        host, port = parse_address(self.config.listen_address)
        loop = asyncio.get_running_loop()
        self._server = await loop.create_server(lambda: _Conn(self), host, port, reuse_address=True)
        self.address = self._server.sockets[0].getsockname()[:2]
        if self.config.snapshot_path and self.config.snapshot_interval > 0:
            self._snap_handle = loop.call_later(self.config.snapshot_interval, self._periodic_snapshot)
        return self.address

    def _periodic_snapshot(self) -> None:
        try:
            self.snapshot()
        except OSError as exc:
            log.warning("periodic snapshot failed: %s", exc)
        loop = asyncio.get_running_loop()
        self._snap_handle = loop.call_later(self.config.snapshot_interval, self._periodic_snapshot)

    def snapshot(self) -> None:
        # Runs on the loop between requests, so the store is quiescent.
        if self.config.snapshot_path:
            self.store.snapshot(self.config.snapshot_path)

    async def stop(self) -> None:
        if self._snap_handle is not None:
            self._snap_handle.cancel()
        if self._server is not None:
            self._server.close()
            for conn in list(self.conns):
                if conn.transport is not None:
                    conn.transport.close()
            await self._server.wait_closed()
        self.snapshot()


def serve(config: HubConfig, ready_file=None) -> None:
    """Run a hub until SIGINT/SIGTERM; writes a final snapshot if configured."""

    async def main():
        hub = Hub(config)
        addr = await hub.start()
        line = f"listening on {format_address(addr)}"
        log.info(line)
        if ready_file is not None:
            print(line, file=ready_file, flush=True)
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        await stop.wait()
        await hub.stop()
        log.info("hub stopped after %d requests", hub.requests)

    asyncio.run(main())


class _LoopThread:
    """Runs an asyncio service on a private loop in a daemon thread."""

    def __init__(self):
        self.loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self.loop.run_forever, daemon=True)

    def _start(self, coro):
        self._thread.start()
        return asyncio.run_coroutine_threadsafe(coro, self.loop).result(10)

    def call(self, fn, *args):
        """Run ``fn`` on the service loop and return its result."""

        async def run():
            return fn(*args)

        return asyncio.run_coroutine_threadsafe(run(), self.loop).result(10)

    def _stop(self, coro):
        try:
            asyncio.run_coroutine_threadsafe(coro, self.loop).result(10)
        finally:
            self.loop.call_soon_threadsafe(self.loop.stop)
            self._thread.join(10)
            self.loop.close()


class HubThread(_LoopThread):
    """An in-process hub for tests and embedding.

    >>> with HubThread() as hub:            # doctest: +SKIP
    ...     HubClient(hub.address_text).connect().stat()
    """

    def __init__(self, config: HubConfig | None = None, store: GraphStore | None = None):
        super().__init__()
        self.hub = Hub(config or HubConfig(), store)

    @property
    def address(self) -> tuple[str, int]:
        return self.hub.address

    @property
    def address_text(self) -> str:
        return format_address(self.hub.address)

    def start(self) -> HubThread:
        self._start(self.hub.start())
        return self

    def stop(self) -> None:
        self._stop(self.hub.stop())

    def __enter__(self) -> HubThread:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def wait_for_port(addr: tuple[str, int], timeout: float = 10.0) -> None:
    deadline = time.monotonic() + timeout
    while True:
        try:
            socket.create_connection(addr, timeout=0.5).close()
            return
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.02)

