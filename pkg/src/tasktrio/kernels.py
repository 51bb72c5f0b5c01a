"""Hot kernels, compiled when available.

``spin(seconds, iterations=1, yield_cpu=True)``
    Busy-wait ``iterations`` times, each until a fresh monotonic deadline
    ``seconds`` away. Returns elapsed seconds. The wall duration is fixed by
    the deadline, so preemption does not stretch it; ``yield_cpu`` hands the
    core to other runnable threads between clock polls. The compiled version
    releases the GIL for the whole call.

``scan_frames(buf, start, cap)``
    Locate complete length-prefixed frames in ``buf`` from ``start``.
    Returns ``(spans, next_offset, oversize)``: ``spans`` is a list of
    ``(body_begin, body_end)``, ``next_offset`` the first unconsumed octet,
    and ``oversize`` the declared length of a frame over ``cap`` (0 if none;
    scanning stops at that frame).

Set ``TASKTRIO_PURE=1`` to force the pure-Python fallback.
"""

from __future__ import annotations

import os

from . import _pykernels

if os.environ.get("TASKTRIO_PURE"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

spin = _impl.spin
scan_frames = _impl.scan_frames

__all__ = ["BACKEND", "spin", "scan_frames"]


def _main(argv: list[str]) -> int:
    """``python -m tasktrio.kernels USEC [ITERS]``: spin, for shell-launched tasks."""
    if not 1 <= len(argv) <= 2:
        print("usage: python -m tasktrio.kernels USEC [ITERS]")
        return 2
    spin(float(argv[0]) * 1e-6, int(argv[1]) if len(argv) == 2 else 1)
    return 0


if __name__ == "__main__":
    import sys

    raise SystemExit(_main(sys.argv[1:]))
