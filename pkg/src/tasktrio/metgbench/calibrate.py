"""How long the spin kernel really takes for a requested duration."""

from __future__ import annotations

import statistics
import time
import warnings
from dataclasses import asdict, dataclass, field

from .. import kernels


class UnstableCalibration(UserWarning):
    pass


@dataclass
class SpinCalibration:
    overhead: float  # seconds per kernel call beyond the request
    backend: str
    samples: dict[str, float] = field(default_factory=dict)  # requested -> median measured
    spread: float = 0.0  # worst relative spread (stdev / mean) among nonzero requests

    @property
    def stable(self) -> bool:
        return self.spread <= 0.25

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stable"] = self.stable
        return d


def measure_spin(seconds: float, iterations: int = 1, repeats: int = 5) -> list[float]:
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        kernels.spin(seconds, iterations)
        out.append(time.perf_counter() - t0)
    return out


def calibrate_spin(requests=(0.0, 1e-4, 1e-3, 2e-3), repeats: int = 7) -> SpinCalibration:
    """Time the kernel at a few requested durations.

    The overhead is the median time of a zero-length call. A spread above
    25% for any nonzero request raises an :class:`UnstableCalibration`
    warning; the calibration is still returned.
    """
    samples = {}
    spread = 0.0
    for req in requests:
        runs = measure_spin(req, 1, repeats)
        samples[f"{req:g}"] = statistics.median(runs)
        if req > 0 and len(runs) > 1:
            spread = max(spread, statistics.stdev(runs) / statistics.mean(runs))
    cal = SpinCalibration(samples.get("0", 0.0), kernels.BACKEND, samples, spread)
    if not cal.stable:
        warnings.warn(f"spin timing spread {spread:.0%} exceeds 25%; the machine may be busy",
                      UnstableCalibration, stacklevel=2)
    return cal
