"""Wall-clock latency of a callable on the monotonic clock."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LatencyStats:
    mean_ms: float
    p50_ms: float
    p95_ms: float
    max_ms: float
    iterations: int

    @classmethod
    def from_samples(cls, samples_ms) -> "LatencyStats":
        s = np.asarray(samples_ms, dtype=np.float64)
        if s.size == 0:
            return cls(0.0, 0.0, 0.0, 0.0, 0)
        return cls(float(s.mean()), float(np.percentile(s, 50)), float(np.percentile(s, 95)),
                   float(s.max()), int(s.size))


def benchmark(target, iterations: int = 100, warmup: int = 10) -> LatencyStats:
    """Call ``target()`` ``warmup`` times untimed, then time ``iterations`` calls."""
    if iterations < 1:
        raise ValueError("iterations must be positive")
    for _ in range(warmup):
        target()
    samples = np.empty(iterations)
    clock = time.perf_counter_ns
    for i in range(iterations):
        t0 = clock()
        target()
        samples[i] = (clock() - t0) / 1e6
    return LatencyStats.from_samples(samples)
