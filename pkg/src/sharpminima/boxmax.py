"""Inexact maximization of a smooth function over an axis-aligned box.

``maximize`` minimizes the negated objective with a projected limited-memory BFGS
scheme: coordinates held at a bound by the gradient are frozen, the two-loop
recursion supplies a direction on the free coordinates, and a projected Armijo
backtracking search picks the step.  ``vertex_bruteforce_max`` is an exact
enumeration oracle for convex quadratics used to check it.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np

from .errors import NumericError, SizeError, SpecError

ARMIJO_C = 1e-4
MAX_HALVINGS = 30
PG_TOL = 1e-8


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=np.float64).ravel()
        hi = np.array(self.upper, dtype=np.float64).ravel()
        if lo.shape != hi.shape:
            raise SpecError("bound vectors differ in length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise SpecError("box bounds must be finite")
        if np.any(lo > hi):
            raise SpecError("lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, half_width) -> "Box":
        hw = np.asarray(half_width, dtype=np.float64)
        return cls(-hw, hw)

    @property
    def dim(self) -> int:
        return self.lower.size

    def contains(self, z) -> bool:
        z = np.asarray(z)
        return bool(np.all(z >= self.lower) and np.all(z <= self.upper))


class ObjectiveOracle:
    """Wraps ``fn(z) -> (value, gradient)`` and counts evaluations."""

    def __init__(self, fn: Callable[[np.ndarray], Tuple[float, np.ndarray]], dim: int):
        self.fn = fn
        self.dim = dim
        self.calls = 0

    def __call__(self, z: np.ndarray):
        self.calls += 1
        value, grad = self.fn(z)
        value = float(value)
        grad = np.asarray(grad, dtype=np.float64).ravel()
        if grad.shape != (self.dim,):
            raise SpecError(f"oracle gradient has length {grad.size}, expected {self.dim}")
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            raise NumericError("objective oracle returned a non-finite value", point=np.array(z))
        return value, grad


@dataclass(frozen=True)
class QuadraticObjective:
    """0.5 y'Hy + g'y + c."""

    H: np.ndarray
    g: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        H = np.atleast_2d(np.array(self.H, dtype=np.float64))
        g = np.array(self.g, dtype=np.float64).ravel()
        if H.shape != (g.size, g.size):
            raise SpecError("H must be p x p with p = len(g)")
        if np.max(np.abs(H - H.T), initial=0.0) > 1e-12:
            raise SpecError("H must be symmetric")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "g", g)

    def value(self, y) -> float:
        y = np.asarray(y, dtype=np.float64)
        return float(0.5 * y @ self.H @ y + self.g @ y + self.c)

    def __call__(self, y):
        y = np.asarray(y, dtype=np.float64)
        return self.value(y), self.H @ y + self.g

    def oracle(self) -> ObjectiveOracle:
        return ObjectiveOracle(self, self.g.size)


@dataclass(frozen=True)
class Diagnostics:
    iterations: int
    oracle_calls: int
    projected_grad_norm: float
    start_value: float


def project(z, box: Box) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != box.lower.shape:
        raise SpecError("point and box dimensions differ")
    return np.minimum(np.maximum(z, box.lower), box.upper)


def _bound_mask(z, g, box):
    """Coordinates pinned at a bound by a descent-direction gradient ``g`` (minimization sense)."""
    return ((z <= box.lower) & (g > 0)) | ((z >= box.upper) & (g < 0)) | (box.lower == box.upper)


def _projected_grad_norm(z, g, box) -> float:
    pg = z - project(z - g, box)
    return float(np.max(np.abs(pg), initial=0.0))


def _two_loop(g: np.ndarray, pairs) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    s, y, _ = pairs[-1]
    q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def maximize(oracle: ObjectiveOracle, box: Box, z0, max_outer: int = 10, memory: int = 10):
    """Approximately maximize ``oracle`` over ``box`` starting from ``z0``.

    Returns ``(z_best, value_best, Diagnostics)``; the best point seen is returned, so
    the value never drops below the value at ``z0``.
    """
    z = np.array(z0, dtype=np.float64).ravel()
    if z.shape != box.lower.shape:
        raise SpecError("start point and box dimensions differ")
    if not box.contains(z):
        raise SpecError("start point lies outside the box")
    width = box.upper - box.lower

    def neg(point):
        v, gr = oracle(point)
        return -v, -gr

    f, g = neg(z)
    start_value = -f
    best_z, best_f = z.copy(), f
    pairs: deque = deque(maxlen=memory)
    iterations = 0
    pg_norm = _projected_grad_norm(z, g, box)

    while iterations < max_outer:
        if pg_norm < PG_TOL:
            if iterations > 0 or not np.any(width > 0):
                break
            # Stationary start: probe the two box corners along the main diagonal.
            iterations += 1
            moved = False
            for corner in (box.upper, box.lower):
                fc, gc = neg(corner)
                if fc < f:
                    z, f, g, moved = corner.copy(), fc, gc, True
            if not moved:
                break
            best_z, best_f = z.copy(), f
            pg_norm = _projected_grad_norm(z, g, box)
            continue

        iterations += 1
        pinned = _bound_mask(z, g, box)
        free = ~pinned
        g_free = np.where(free, g, 0.0)
        d = None
        if pairs:
            d = -_two_loop(g_free, list(pairs))
            d[pinned] = 0.0
            if not g_free @ d < 0:
                d = None
        if d is None:
            d = -g_free
            # unit quasi-Newton scale is meaningless without curvature pairs: scale the
            # trial step so the largest component spans the widest free box edge
            t = float(np.max(width[free], initial=0.0)) / float(np.max(np.abs(d)))
        else:
            t = 1.0

        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            z_new = project(z + t * d, box)
            step = z_new - z
            if np.any(step != 0):
                f_new, g_new = neg(z_new)
                if f_new <= f + ARMIJO_C * (g @ step):
                    accepted = True
                    break
            t *= 0.5

        if not accepted:
            # projected gradient step with a secant estimate of the Lipschitz constant
            if pairs:
                s, y, _ = pairs[-1]
                lip = max(float(np.linalg.norm(y) / np.linalg.norm(s)), 1e-300)
            else:
                lip = float(np.linalg.norm(g_free)) / max(float(np.max(width)), 1e-300)
            z_new = project(z - g_free / lip, box)
            step = z_new - z
            if not np.any(step != 0):
                break
            f_new, g_new = neg(z_new)
            if f_new >= f:
                break

        s_vec, y_vec = z_new - z, g_new - g
        sy = float(s_vec @ y_vec)
        if sy > 1e-10 * float(y_vec @ y_vec):
            pairs.append((s_vec, y_vec, 1.0 / sy))
        z, f, g = z_new, f_new, g_new
        if f < best_f:
            best_z, best_f = z.copy(), f
        pg_norm = _projected_grad_norm(z, g, box)

    diag = Diagnostics(iterations, oracle.calls, pg_norm, start_value)
    return best_z, -best_f, diag


def vertex_bruteforce_max(q: QuadraticObjective, box: Box, max_dim: int = 20):
    """Exact maximum over the 2^p box vertices; exact for positive semidefinite H."""
    p = q.g.size
    if p != box.dim:
        raise SpecError("objective and box dimensions differ")
    if p > max_dim:
        raise SizeError(f"vertex enumeration limited to p <= {max_dim}, got {p}")
    best_v, best_val = None, -np.inf
    for bits in itertools.product((0, 1), repeat=p):
        mask = np.array(bits, dtype=bool)
        v = np.where(mask, box.upper, box.lower)
        val = q.value(v)
        if val > best_val:
            best_v, best_val = v, val
    return best_v, best_val
