"""Communicators: every collective is built on one all-to-all exchange."""

from __future__ import annotations

import functools
import multiprocessing
import pickle
import socket
import struct
import threading
import time
import traceback
from typing import Any, Callable, Sequence

Op = Callable[[Any, Any], Any]


class Communicator:
    """Collective operations for a group of ``size`` ranks.

    Subclasses provide :meth:`alltoall`; the rest is derived from it so
    every collective has the same matched, bulk-synchronous shape. Folds
    always run in rank order, so results do not depend on arrival order.
    """

    rank: int
    size: int

    def alltoall(self, outgoing: Sequence[Any]) -> list[Any]:
        """Send ``outgoing[d]`` to rank ``d``; return what each rank sent here."""
        raise NotImplementedError

    def close(self) -> None:
        pass

    def _check(self, outgoing: Sequence[Any]) -> None:
        if len(outgoing) != self.size:
            raise ValueError(f"alltoall needs {self.size} payloads, got {len(outgoing)}")

    def allgather(self, value: Any) -> list[Any]:
        return self.alltoall([value] * self.size)

    def barrier(self) -> None:
        self.alltoall([None] * self.size)

    def bcast(self, value: Any, root: int = 0) -> Any:
        out = [value if self.rank == root else None] * self.size
        return self.alltoall(out)[root]

    def gather(self, value: Any, root: int = 0) -> list[Any] | None:
        out = [None] * self.size
        out[root] = value
        got = self.alltoall(out)
        return got if self.rank == root else None

    def allreduce(self, value: Any, op: Op) -> Any:
        return functools.reduce(op, self.allgather(value))

    def reduce(self, value: Any, op: Op, root: int = 0) -> Any | None:
        got = self.gather(value, root)
        return functools.reduce(op, got) if got is not None else None

    def exscan(self, value: Any, op: Op, init: Any) -> Any:
        """``init`` folded with the values of all lower ranks."""
        return functools.reduce(op, self.allgather(value)[: self.rank], init)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class SelfComm(Communicator):
    """The one-rank group."""

    rank = 0
    size = 1

    def alltoall(self, outgoing):
        self._check(outgoing)
        return list(outgoing)


# --- in-process ranks -----------------------------------------------------


class _Board:
    def __init__(self, size: int):
        self.size = size
        self.slots: list[Sequence[Any] | None] = [None] * size
        self.barrier = threading.Barrier(size)


class ThreadComm(Communicator):
    """One rank of a group of threads sharing an exchange board.

    Payloads crossing ranks are pickled on the way, so ranks never share
    mutable objects (as with real message passing).
    """

    def __init__(self, board: _Board, rank: int, copy: bool = True):
        self.board = board
        self.rank = rank
        self.size = board.size
        self.copy = copy

    @classmethod
    def group(cls, size: int, copy: bool = True) -> list["ThreadComm"]:
        if size < 1:
            raise ValueError("size must be >= 1")
        board = _Board(size)
        return [cls(board, r, copy) for r in range(size)]

    def alltoall(self, outgoing):
        self._check(outgoing)
        if self.copy:
            outgoing = [v if d == self.rank else pickle.dumps(v) for d, v in enumerate(outgoing)]
        b = self.board
        b.slots[self.rank] = outgoing
        b.barrier.wait()
        got = [b.slots[src][self.rank] for src in range(self.size)]
        b.barrier.wait()
        if self.copy:
            got = [v if src == self.rank else pickle.loads(v) for src, v in enumerate(got)]
        return got

    def abort(self) -> None:
        self.board.barrier.abort()


def run_ranks(size: int, fn: Callable[..., Any], *args, copy: bool = True) -> list[Any]:
    """Run ``fn(comm, *args)`` on ``size`` thread ranks; return per-rank results.

    If any rank raises, the exchange board is aborted so the other ranks
    stop at their next collective, and the first real error is re-raised.
    """
    comms = ThreadComm.group(size, copy)
    results: list[Any] = [None] * size
    errors: list[tuple[int, BaseException]] = []

    def body(comm: ThreadComm) -> None:
        try:
            results[comm.rank] = fn(comm, *args)
        except threading.BrokenBarrierError:
            pass
        except BaseException as exc:  # noqa: BLE001 - handed back to the caller
            errors.append((comm.rank, exc))
            comm.abort()

    threads = [threading.Thread(target=body, args=(c,), name=f"rank{c.rank}") for c in comms[1:]]
    for t in threads:
        t.start()
    body(comms[0])
    for t in threads:
        t.join()
    if errors:
        raise min(errors, key=lambda e: e[0])[1]
    return results


# --- process ranks over sockets -------------------------------------------

_LEN = struct.Struct("<Q")


def _send(sock: socket.socket, obj: Any) -> None:
    data = pickle.dumps(obj, protocol=pickle.HIGHEST_PROTOCOL)
    sock.sendall(_LEN.pack(len(data)) + data)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer rank closed its connection")
        buf += chunk
    return bytes(buf)


def _recv(sock: socket.socket) -> Any:
    (n,) = _LEN.unpack(_recv_exact(sock, _LEN.size))
    return pickle.loads(_recv_exact(sock, n))


class SocketComm(Communicator):
    """Ranks in separate processes, connected in a star around rank 0.

    Rank 0 listens at the rendezvous address; every other rank connects
    and announces its rank. An exchange sends each rank's payload row to
    rank 0, which transposes the matrix and returns each rank its column.
    Payloads are pickled, so all ranks must trust each other.
    """

    def __init__(self, rank: int, size: int, peers: dict[int, socket.socket] | None = None,
                 hub: socket.socket | None = None):
        self.rank = rank
        self.size = size
        self._peers = peers or {}
        self._hub = hub

    @classmethod
    def connect(cls, rank: int, size: int, address: tuple[str, int],
                listener: socket.socket | None = None, timeout: float = 30.0) -> "SocketComm":
        if rank == 0:
            own = listener is None
            if own:
                listener = socket.create_server(address)
            peers = {}
            listener.settimeout(timeout)
            try:
                while len(peers) < size - 1:
                    conn, _ = listener.accept()
                    conn.settimeout(None)
                    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                    peers[_recv(conn)] = conn
            finally:
                if own:
                    listener.close()
            return cls(0, size, peers=peers)
        deadline = time.monotonic() + timeout
        while True:
            try:
                sock = socket.create_connection(address, timeout=timeout)
                break
            except OSError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.02)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        _send(sock, rank)
        return cls(rank, size, hub=sock)

    def alltoall(self, outgoing):
        self._check(outgoing)
        if self.rank != 0:
            _send(self._hub, list(outgoing))
            return _recv(self._hub)
        rows = {0: list(outgoing)}
        for r, sock in self._peers.items():
            rows[r] = _recv(sock)
        for r, sock in self._peers.items():
            _send(sock, [rows[src][r] for src in range(self.size)])
        return [rows[src][0] for src in range(self.size)]

    def close(self) -> None:
        for s in self._peers.values():
            s.close()
        if self._hub is not None:
            self._hub.close()
        self._peers, self._hub = {}, None


def _process_main(rank, size, address, listener, fn, args, results):
    try:
        with SocketComm.connect(rank, size, address, listener) as comm:
            results.put((rank, True, fn(comm, *args)))
    except BaseException as exc:  # noqa: BLE001 - reported to the parent
        results.put((rank, False, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"))


def run_processes(size: int, fn: Callable[..., Any], *args, timeout: float = 120.0) -> list[Any]:
    """Run ``fn(comm, *args)`` in ``size`` forked processes joined by :class:`SocketComm`."""
    ctx = multiprocessing.get_context("fork")
    listener = socket.create_server(("127.0.0.1", 0))
    address = listener.getsockname()[:2]
    results = ctx.Queue()
    procs = [
        ctx.Process(target=_process_main, args=(r, size, address, listener if r == 0 else None, fn, args, results))
        for r in range(size)
    ]
    for p in procs:
        p.start()
    listener.close()
    out: list[Any] = [None] * size
    failures = []
    try:
        for _ in range(size):
            rank, ok, value = results.get(timeout=timeout)
            if ok:
                out[rank] = value
            else:
                failures.append((rank, value))
                break
    finally:
        for p in procs:
            if failures:
                p.terminate()
            p.join(5)
    if failures:
        rank, msg = failures[0]
        raise RuntimeError(f"rank {rank} failed: {msg}")
    return out
