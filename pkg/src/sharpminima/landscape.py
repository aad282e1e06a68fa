"""One-dimensional slices of the loss between two minimizers, and distances from the start point."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import net
from .data import Dataset
from .errors import DegenerateError, SpecError


@dataclass(frozen=True)
class SlicePoint:
    alpha: float
    train_loss: float
    test_loss: float
    train_acc: float
    test_acc: float


def default_alphas(count: int = 61, lo: float = -1.0, hi: float = 2.0) -> np.ndarray:
    """Uniform grid on [lo, hi] that is closed under alpha -> 1 - alpha in floating point.

    The half of the grid at or above 1/2 is generated directly; the other half is
    ``1 - alpha`` of it, which is exact there (Sterbenz), so mirroring twice returns
    the original value bit-for-bit.  Requires lo + hi == 1.
    """
    if lo + hi != 1.0:
        raise SpecError("mirror-closed grid needs lo + hi == 1")
    full = np.linspace(lo, hi, count)
    upper = full[full >= 0.5]
    lower = 1.0 - upper[::-1]
    lower = lower[lower < 0.5]
    return np.concatenate([lower, upper])


def evaluate_point(spec: net.NetworkSpec, params: net.ParamVector, train: Dataset, test: Dataset,
                   alpha: float = float("nan")) -> SlicePoint:
    """Eval-mode losses and accuracies; batch-norm statistics are recomputed on ``train`` at this point."""
    p = net.recalibrate_buffers(spec, params, train.features)
    return SlicePoint(
        float(alpha),
        net.loss_value(spec, p, train.features, train.labels),
        net.loss_value(spec, p, test.features, test.labels),
        net.accuracy(spec, p, train),
        net.accuracy(spec, p, test),
    )


def _slice(spec, x_s, x_l, train, test, alphas, weights, workers) -> List[SlicePoint]:
    if x_s.values.shape != x_l.values.shape:
        raise SpecError("slice endpoints differ in dimension")
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise SpecError("empty alpha grid")

    def job(a):
        w_l, w_s = weights(a)
        return evaluate_point(spec, x_s.with_values(w_l * x_l.values + w_s * x_s.values), train, test, a)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(job, alphas))
    return [job(a) for a in alphas]


def linear_slice(spec, x_s: net.ParamVector, x_l: net.ParamVector, train: Dataset, test: Dataset,
                 alphas: Optional[Sequence[float]] = None, workers: int = 1) -> List[SlicePoint]:
    """f and accuracy at alpha * x_l + (1 - alpha) * x_s."""
    alphas = default_alphas() if alphas is None else alphas
    return _slice(spec, x_s, x_l, train, test, alphas, lambda a: (a, 1.0 - a), workers)


def curvilinear_slice(spec, x_s: net.ParamVector, x_l: net.ParamVector, train: Dataset, test: Dataset,
                      alphas: Optional[Sequence[float]] = None, workers: int = 1) -> List[SlicePoint]:
    """f and accuracy at sin(alpha pi / 2) x_l + cos(alpha pi / 2) x_s."""
    alphas = default_alphas() if alphas is None else alphas
    return _slice(spec, x_s, x_l, train, test, alphas,
                  lambda a: (math.sin(a * math.pi / 2), math.cos(a * math.pi / 2)), workers)


def distance_ratio(x0, x_s, x_l):
    """(||x_s - x0||, ||x_l - x0||, ratio)."""
    x0, x_s, x_l = (np.asarray(getattr(v, "values", v), dtype=np.float64) for v in (x0, x_s, x_l))
    if not x0.shape == x_s.shape == x_l.shape:
        raise SpecError("points differ in dimension")
    d_s = float(np.linalg.norm(x_s - x0))
    d_l = float(np.linalg.norm(x_l - x0))
    if d_l == 0.0:
        raise DegenerateError("large-batch solution coincides with the start point")
    return d_s, d_l, d_s / d_l
