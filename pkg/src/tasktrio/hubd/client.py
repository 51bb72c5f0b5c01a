"""Blocking client for the hub protocol (also works against a relay)."""

from __future__ import annotations

import os
import socket

from .. import wire

ENV_ADDR = "HUB_ADDR"


def parse_address(text: str | None, default_host: str = "127.0.0.1") -> tuple[str, int]:
    """``"host:port"`` (or ``":port"``) to a tuple; falls back to ``$HUB_ADDR``."""
    if not text:
        text = os.environ.get(ENV_ADDR)
    if not text:
        raise ValueError(f"no hub address given and ${ENV_ADDR} is unset")
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"bad address {text!r}; expected HOST:PORT")
    return (host.strip("[]") or default_host, int(port))


def format_address(addr: tuple[str, int]) -> str:
    return f"{addr[0]}:{addr[1]}"


class HubClient:
    """One connection; requests may be pipelined with :meth:`send`/:meth:`recv`."""

    def __init__(
        self,
        address: str | tuple[str, int],
        timeout: float | None = None,
        frame_cap: int = wire.DEFAULT_FRAME_CAP,
    ):
        self.address = parse_address(address) if isinstance(address, str) else address
        self.timeout = timeout
        self.frame_cap = frame_cap
        self._sock: socket.socket | None = None
        self._buf = bytearray()

    def connect(self, timeout: float = 5.0) -> HubClient:
        sock = socket.create_connection(self.address, timeout=timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(self.timeout)
        self._sock = sock
        self._buf.clear()
        return self

    @property
    def connected(self) -> bool:
        return self._sock is not None

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def __enter__(self) -> HubClient:
        if self._sock is None:
            self.connect()
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def send(self, msg: wire.Message) -> None:
        self.send_raw(wire.encode(msg, self.frame_cap))

    def send_raw(self, data: bytes) -> None:
        if self._sock is None:
            self.connect()
        self._sock.sendall(data)

    def recv(self) -> wire.Message:
        while True:
            try:
                item, used = wire.decode(self._buf, self.frame_cap)
            except wire.Truncated:
                pass
            else:
                del self._buf[:used]
                if isinstance(item, wire.Envelope):
                    raise wire.Malformed("unexpected relay envelope on a client connection")
                return item
            if self._sock is None:
                raise ConnectionError("not connected")
            chunk = self._sock.recv(1 << 16)
            if not chunk:
                self.close()
                raise ConnectionError("hub closed the connection")
            self._buf += chunk

    def request(self, msg: wire.Message) -> wire.Message:
        self.send(msg)
        return self.recv()

    def stat(self) -> wire.StatResp:
        resp = self.request(wire.StatReq())
        if not isinstance(resp, wire.StatResp):
            raise wire.Malformed(f"stat answered with {resp.KIND}")
        return resp
