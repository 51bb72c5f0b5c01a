"""Pure-Python versions of the hot loops, used when the extension is absent."""

from __future__ import annotations

import os
import struct
from time import perf_counter

_LEN = struct.Struct("<I")


def spin(seconds: float, iterations: int = 1, yield_cpu: bool = True) -> float:
    if seconds < 0:
        raise ValueError("negative spin duration")
    if iterations < 0:
        raise ValueError("negative iteration count")
    now = perf_counter
    sched_yield = os.sched_yield
    t0 = now()
    for _ in range(iterations):
        deadline = now() + seconds
        while now() < deadline:
            if yield_cpu:
                sched_yield()
    return now() - t0


def scan_frames(buf, start: int, cap: int):
    n = len(buf)
    pos = start
    spans = []
    unpack = _LEN.unpack_from
    while n - pos >= 4:
        (length,) = unpack(buf, pos)
        if length > cap:
            return spans, pos, length
        if n - pos - 4 < length:
            break
        spans.append((pos + 4, pos + 4 + length))
        pos += 4 + length
    return spans, pos, 0
