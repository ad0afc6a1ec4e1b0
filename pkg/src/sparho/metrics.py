"""Error metrics, per-run series and across-run summaries."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def rms_error(q, q_true, terminal=None, weights=None) -> float:
    """Root-mean-square error over non-terminal ``(s, a)`` entries.

    ``weights`` (same shape as ``q``) switches to a weighted mean; the default
    is unweighted.
    """
    q = np.asarray(q, dtype=np.float64)
    q_true = np.asarray(q_true, dtype=np.float64)
    if q.shape != q_true.shape:
        raise ValueError(f"shape mismatch {q.shape} vs {q_true.shape}")
    mask = np.ones(q.shape, dtype=bool)
    if terminal is not None:
        mask[np.asarray(terminal, dtype=bool)] = False
    err = (q - q_true)[mask]
    if weights is None:
        return float(np.sqrt(np.mean(err * err)))
    w = np.asarray(weights, dtype=np.float64)[mask]
    return float(np.sqrt(np.sum(w * err * err) / np.sum(w)))


@dataclass
class MetricSeries:
    """Time-indexed values of one metric for one run."""

    metric: str
    steps: list[int] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, step: int, value: float) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ValueError(f"steps must increase: {step} after {self.steps[-1]}")
        self.steps.append(int(step))
        self.values.append(float(value))

    @property
    def final(self) -> float:
        return self.values[-1] if self.values else float("nan")

    def auc(self) -> float:
        """Mean value over the recorded points."""
        return float(np.mean(self.values)) if self.values else float("nan")

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class RunSummary:
    mean: float
    stderr: float
    runs: int
    n_finite: int

    @classmethod
    def from_values(cls, values) -> "RunSummary":
        """Mean and standard error ``std(ddof=1) / sqrt(runs)``; non-finite runs are excluded and counted."""
        x = np.asarray(values, dtype=np.float64)
        ok = x[np.isfinite(x)]
        if ok.size == 0:
            return cls(float("nan"), float("nan"), int(x.size), 0)
        stderr = float(np.std(ok, ddof=1) / np.sqrt(ok.size)) if ok.size > 1 else 0.0
        return cls(float(np.mean(ok)), stderr, int(x.size), int(ok.size))


def pooled_stderr(a: RunSummary, b: RunSummary) -> float:
    return float(np.hypot(a.stderr, b.stderr))
