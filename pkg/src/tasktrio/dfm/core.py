"""Context and the distributed list."""

from __future__ import annotations

import functools
import operator
from typing import Any, Callable, Iterable, Mapping, Sequence

from .comm import Communicator, Op, SelfComm
from .partition import Partition


class DfmError(Exception):
    pass


class ElementError(DfmError):
    """A user function failed on one element; ``index`` is its global position."""

    def __init__(self, index: int, rank: int, cause: BaseException):
        self.index = index
        self.rank = rank
        self.cause = cause
        super().__init__(f"element {index} (rank {rank}): {type(cause).__name__}: {cause}")


class InconsistentLength(DfmError):
    pass


class DestinationOutOfRange(DfmError):
    pass


class Context:
    """Communicator plus rank bookkeeping; the factory for new lists."""

    def __init__(self, comm: Communicator | None = None):
        self.comm = comm or SelfComm()
        if self.comm.size < 1:
            raise ValueError("procs must be >= 1")

    @property
    def rank(self) -> int:
        return self.comm.rank

    @property
    def procs(self) -> int:
        return self.comm.size

    def partition(self, n: int) -> Partition:
        return Partition(n, self.procs)

    def iterates(self, n: int) -> "DFM":
        """The integers ``0..n-1``, split by :class:`Partition`."""
        lo, hi = self.partition(n).bounds(self.rank)
        return DFM(self, list(range(lo, hi)), offset=lo)

    def from_local(self, items: Iterable[Any]) -> "DFM":
        return DFM(self, list(items))


class DFM:
    """An ordered global list; this rank holds one contiguous piece of it.

    Every method is collective in the bulk-synchronous sense: all ranks
    must call the same methods in the same order, even where the method
    happens not to communicate.
    """

    def __init__(self, ctx: Context, local: list[Any], offset: int | None = None):
        self.ctx = ctx
        self.local = local
        self._offset = offset

    def __repr__(self) -> str:
        return f"DFM(rank={self.ctx.rank}/{self.ctx.procs}, local={len(self.local)})"

    @property
    def offset(self) -> int:
        """Global index of this rank's first element (collective on first use)."""
        if self._offset is None:
            self._offset = self.ctx.comm.exscan(len(self.local), operator.add, 0)
        return self._offset

    def _apply(self, f: Callable[[Any], Any]) -> list[Any]:
        base = self.offset
        out = []
        for i, x in enumerate(self.local):
            try:
                out.append(f(x))
            except Exception as exc:
                raise ElementError(base + i, self.ctx.rank, exc) from exc
        return out

    # -- local ------------------------------------------------------------

    def map(self, f: Callable[[Any], Any]) -> "DFM":
        return DFM(self.ctx, self._apply(f), self._offset)

    def flatMap(self, f: Callable[[Any], Iterable[Any]]) -> "DFM":
        out = [y for ys in self._apply(lambda x: list(f(x))) for y in ys]
        return DFM(self.ctx, out)

    flat_map = flatMap

    # -- collective -------------------------------------------------------

    def len(self) -> int:
        return self.ctx.comm.allreduce(len(self.local), operator.add)

    def collect(self, root: int = 0) -> list[Any]:
        """The whole list on ``root``; an empty list elsewhere."""
        parts = self.ctx.comm.gather(self.local, root)
        return [x for part in parts for x in part] if parts is not None else []

    def reduce(self, op: Op, init: Any) -> Any:
        """Fold of the whole list, on every rank. ``init`` should be ``op``'s identity."""
        return self.ctx.comm.allreduce(functools.reduce(op, self.local, init), op)

    def scan(self, op: Op, init: Any) -> "DFM":
        """Inclusive prefix fold: element ``i`` becomes ``init op x0 op ... op xi``."""
        comm = self.ctx.comm
        totals = comm.allgather(functools.reduce(op, self.local, init))
        acc = functools.reduce(op, totals[: comm.rank], init)
        out = []
        for x in self.local:
            acc = op(acc, x)
            out.append(acc)
        return DFM(self.ctx, out, self._offset)

    def repartition(
        self,
        len_f: Callable[[Any], int],
        split_f: Callable[[Any, list[int]], Sequence[Any]],
        concat_f: Callable[[list[Any]], Any],
    ) -> "DFM":
        """Rebalance records so each rank ends with one container of its share.

        Elements are containers of ``len_f(x)`` records. ``split_f(x, cuts)``
        cuts ``x`` before each record offset in ``cuts`` (like ``numpy.split``)
        and ``concat_f(chunks)`` joins chunks in order. Records are spread by
        :class:`Partition` over the global record count.
        """
        comm = self.ctx.comm
        sizes = [int(len_f(x)) for x in self.local]
        if any(s < 0 for s in sizes):
            raise InconsistentLength("len_f returned a negative length")
        counts = comm.allgather(sum(sizes))
        part = Partition(sum(counts), comm.size)
        pos = sum(counts[: comm.rank])
        outgoing: list[list[Any]] = [[] for _ in range(comm.size)]
        for x, size in zip(self.local, sizes):
            if size == 0:
                pos += size
                continue
            first, last = part.owner(pos), part.owner(pos + size - 1)
            cuts = [part.start(d) - pos for d in range(first + 1, last + 1)]
            chunks = list(split_f(x, cuts)) if cuts else [x]
            want = [b - a for a, b in zip([0] + cuts, cuts + [size])]
            got = [int(len_f(c)) for c in chunks]
            if got != want:
                raise InconsistentLength(f"split_f gave chunk lengths {got}, expected {want}")
            for d, chunk in zip(range(first, last + 1), chunks):
                outgoing[d].append(chunk)
            pos += size
        received = comm.alltoall(outgoing)
        merged = concat_f([c for chunks in received for c in chunks])
        return DFM(self.ctx, [merged], comm.rank)

    def group(
        self,
        dest_f: Callable[[Any], Mapping[int, list[Any]]],
        combine_f: Callable[[list[Any]], Any],
    ) -> "DFM":
        """Route items to ranks and combine each rank's arrivals into one element.

        ``dest_f(x)`` maps destination ranks to item lists. Arrivals are
        ordered by source rank, then by source-local order.
        """
        comm = self.ctx.comm
        outgoing: list[list[Any]] = [[] for _ in range(comm.size)]
        for i, x in enumerate(self.local):
            for d, items in dest_f(x).items():
                if isinstance(d, bool) or not isinstance(d, int) or not 0 <= d < comm.size:
                    raise DestinationOutOfRange(f"destination {d!r} not in [0, {comm.size})")
                outgoing[d].extend(items)
        received = comm.alltoall(outgoing)
        return DFM(self.ctx, [combine_f([y for items in received for y in items])], comm.rank)


# containers that behave like lists, for repartition
def split_list(x: Sequence[Any], cuts: list[int]) -> list[Any]:
    bounds = [0, *cuts, len(x)]
    return [x[a:b] for a, b in zip(bounds, bounds[1:])]


def concat_lists(chunks: list[Sequence[Any]]) -> list[Any]:
    return [y for c in chunks for y in c]
