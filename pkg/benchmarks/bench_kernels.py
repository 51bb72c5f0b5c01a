"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--frames N] [--repeats R]

Reports spin accuracy (requested versus measured duration, and how much
another thread gets done meanwhile) and frame-scanning throughput.
"""

from __future__ import annotations

import argparse
import json
import statistics
import struct
import threading
import time

from tasktrio import _pykernels

try:
    from tasktrio import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def frames_buffer(n: int, body: int = 40) -> bytes:
    payload = b"x" * body
    return b"".join(struct.pack("<I", len(payload)) + payload for _ in range(n))


def bench_scan(mod, buf: bytes, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        spans, _, _ = mod.scan_frames(buf, 0, 1 << 24)
        times.append(time.perf_counter() - t0)
    return len(spans) / min(times)


def bench_spin(mod, seconds: float, repeats: int) -> dict:
    measured = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        mod.spin(seconds, 1)
        measured.append(time.perf_counter() - t0)
    # how much pure-Python work a second thread completes while we spin
    count = 0
    stop = threading.Event()

    def other():
        nonlocal count
        while not stop.is_set():
            count += 1

    t = threading.Thread(target=other)
    t.start()
    mod.spin(max(seconds, 0.05), 1)
    stop.set()
    t.join()
    return {"request_us": seconds * 1e6, "median_us": statistics.median(measured) * 1e6,
            "max_us": max(measured) * 1e6, "other_thread_loops": count}


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--frames", type=int, default=200_000)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--json", action="store_true")
    args = p.parse_args(argv)
    backends = {"python": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    buf = frames_buffer(args.frames)
    results = {}
    for name, mod in backends.items():
        results[name] = {
            "scan_frames_per_s": bench_scan(mod, buf, args.repeats),
            "spin": [bench_spin(mod, s, args.repeats) for s in (1e-5, 1e-4, 1e-3)],
        }
    if args.json:
        print(json.dumps(results, indent=2))
        return 0
    for name, r in results.items():
        print(f"[{name}] scan_frames: {r['scan_frames_per_s'] / 1e6:.2f} M frames/s")
        for s in r["spin"]:
            print(f"[{name}] spin {s['request_us']:>7.0f} us -> median {s['median_us']:8.1f} us, "
                  f"max {s['max_us']:8.1f} us; concurrent thread loops {s['other_thread_loops']}")
    if "cython" in results:
        ratio = results["cython"]["scan_frames_per_s"] / results["python"]["scan_frames_per_s"]
        print(f"scan_frames speedup (cython / python): {ratio:.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
