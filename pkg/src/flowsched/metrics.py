"""Fairness and utilization statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_WINDOW = 0.5


class MetricError(ValueError):
    pass


def jain_index(x: Sequence[float]) -> float:
    """Jain's fairness index (sum x)^2 / (N sum x^2), in [1/N, 1]."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise MetricError("need a non-empty vector")
    if np.any(x < 0):
        raise MetricError("allocations must be non-negative")
    sq = float(np.dot(x, x))
    if sq == 0.0:
        raise MetricError("Jain index undefined for an all-zero vector")
    return float(x.sum()) ** 2 / (x.size * sq)


@dataclass
class WindowedTrace:
    """Delivered bits per flow in consecutive windows.

    ``bits[w, k]`` is what flow ``k`` delivered in window ``w``, which spans
    ``[start + w*window, start + (w+1)*window)``.
    """

    window: float
    bits: np.ndarray
    start: float = 0.0

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=float)
        if self.bits.ndim != 2:
            raise MetricError("trace must be a (windows x flows) array")
        if np.any(self.bits < 0):
            raise MetricError("trace entries must be non-negative")
        if not self.window > 0:
            raise MetricError("window length must be positive")

    @property
    def n_windows(self) -> int:
        return self.bits.shape[0]

    def totals(self) -> np.ndarray:
        return self.bits.sum(axis=0)

    def rates(self) -> np.ndarray:
        return self.bits / self.window

    def rows(self):
        """(t, flow, rate) tuples, rate in bits/s, for CSV export."""
        for w in range(self.n_windows):
            t = self.start + w * self.window
            for k in range(self.bits.shape[1]):
                yield t, k + 1, self.bits[w, k] / self.window


def windowed_jain(trace: WindowedTrace) -> float:
    """Mean per-window Jain index; windows with no traffic are skipped."""
    if trace.n_windows == 0:
        raise MetricError("empty trace")
    values = [jain_index(row) for row in trace.bits if row.sum() > 0]
    if not values:
        raise MetricError("no window carried traffic")
    return float(np.mean(values))


def long_term_jain(totals: Sequence[float]) -> float:
    return jain_index(totals)


def goodput_ratio(report) -> float:
    """Delivered over sent, aggregated over the report's flows."""
    sent = float(np.sum(report.sent_measured))
    if sent <= 0:
        raise MetricError("nothing was sent")
    return float(np.sum(report.delivered_measured)) / sent


def utilization(report, C: float) -> float:
    """Sum of flow throughputs over capacity ``C`` (same units as the report)."""
    return float(np.sum(report.throughput)) / C
