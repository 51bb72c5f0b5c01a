from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Partition:
    """Contiguous, ascending split of ``n`` items over ``procs`` ranks.

    The first ``n % procs`` ranks get one extra item.
    """

    n: int
    procs: int

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("n must be >= 0")
        if self.procs < 1:
            raise ValueError("procs must be >= 1")

    def start(self, p: int) -> int:
        q, r = divmod(self.n, self.procs)
        return p * q + min(p, r)

    def count(self, p: int) -> int:
        q, r = divmod(self.n, self.procs)
        return q + (1 if p < r else 0)

    def bounds(self, p: int) -> tuple[int, int]:
        s = self.start(p)
        return s, s + self.count(p)

    def owner(self, i: int) -> int:
        """Rank holding global position ``i``."""
        if not 0 <= i < self.n:
            raise IndexError(i)
        q, r = divmod(self.n, self.procs)
        big = r * (q + 1)
        return i // (q + 1) if i < big else r + (i - big) // q
