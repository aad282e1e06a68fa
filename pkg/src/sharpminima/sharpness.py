"""(C_eps, A)-sharpness: relative worst-case rise of the training loss in a small box.

For an iterate x, a box half-width eps and an n x p matrix A,

    phi = 100 * (max_{y in C_eps} f(x + A y) - f(x)) / (1 + f(x)),

where C_eps = {y : |y_i| <= eps * (|(A^+ x)_i| + 1)}.  With no A (full space) the
box is taken around x itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.linalg

from . import boxmax
from .boxmax import Box, Diagnostics, ObjectiveOracle, QuadraticObjective
from .errors import RankError, SpecError

DEFAULT_EPSILONS = (1e-3, 5e-4)
DEFAULT_SUBSPACE_DIM = 100

# f: point in R^n -> (value, gradient)
LossOracle = Callable[[np.ndarray], Tuple[float, np.ndarray]]


@dataclass(frozen=True)
class SubspaceSpec:
    """Full space (A = I, never materialized) or a seeded Gaussian n x p matrix."""

    kind: str = "full"
    p: int = 0
    seed: int = 0
    A: Optional[np.ndarray] = None

    @classmethod
    def full(cls) -> "SubspaceSpec":
        return cls("full")

    @classmethod
    def random(cls, n: int, p: int = DEFAULT_SUBSPACE_DIM, seed: int = 0) -> "SubspaceSpec":
        if not 1 <= p <= n:
            raise SpecError(f"subspace dimension {p} must lie in [1, {n}]")
        s = seed
        while True:
            A = np.random.default_rng(s).standard_normal((n, p))
            if np.linalg.matrix_rank(A) == p:
                return cls("random", p, s, A)
            s += 1

    @classmethod
    def from_matrix(cls, A) -> "SubspaceSpec":
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        if A.shape[0] == 1 and A.ndim == 2 and A.shape[1] > 1:
            A = A.T
        return cls("matrix", A.shape[1], 0, A)

    @property
    def is_full(self) -> bool:
        return self.kind == "full"

    def label(self) -> str:
        return "full" if self.is_full else f"{self.kind}{self.p}"

    def dim(self, n: int) -> int:
        return n if self.is_full else self.p

    def apply(self, y: np.ndarray) -> np.ndarray:
        return y if self.is_full else self.A @ y

    def apply_t(self, v: np.ndarray) -> np.ndarray:
        return v if self.is_full else self.A.T @ v


@dataclass(frozen=True)
class SharpnessReport:
    phi: float
    epsilon: float
    subspace: str
    p: int
    seed: int
    f_at_x: float
    max_value_found: float
    diagnostics: Optional[Diagnostics]


def pseudo_inverse_apply(A, x) -> np.ndarray:
    """A^+ x for full-column-rank A via the p x p normal equations (A'A) w = A'x."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64).ravel()
    if A.shape[0] != x.size:
        raise SpecError(f"A has {A.shape[0]} rows but x has length {x.size}")
    gram = A.T @ A
    rhs = A.T @ x
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True, check_finite=True)
        return scipy.linalg.cho_solve(factor, rhs)
    except np.linalg.LinAlgError:
        pass
    # Cholesky failed: column-pivoted QR of A itself
    Q, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[-1] <= max(A.shape) * np.finfo(float).eps * diag[0]:
        raise RankError("A'A is rank deficient")
    w = np.empty(A.shape[1])
    w[piv] = scipy.linalg.solve_triangular(R, Q.T @ x)
    return w


def build_box(subspace: SubspaceSpec, x, eps: float) -> Box:
    if not eps > 0:
        raise SpecError("epsilon must be positive")
    x = np.asarray(x, dtype=np.float64).ravel()
    coords = x if subspace.is_full else pseudo_inverse_apply(subspace.A, x)
    return Box.symmetric(eps * (np.abs(coords) + 1.0))


def sharpness(f: LossOracle, x, eps: float, subspace: SubspaceSpec = SubspaceSpec.full(),
              max_outer: int = 10, restarts: int = 0, restart_seed: int = 0,
              inner: str = "lbfgsb") -> SharpnessReport:
    """Compute phi at ``x``.

    ``inner="lbfgsb"`` uses the bounded quasi-Newton maximizer started at y = 0 plus
    ``restarts`` uniform random feasible starts.  ``inner="vertex"`` requires ``f`` to be a
    :class:`QuadraticObjective` and enumerates the box vertices, which is exact when the
    quadratic is convex.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    if not subspace.is_full and subspace.A.shape[0] != n:
        raise SpecError("subspace matrix rows do not match the parameter count")
    box = build_box(subspace, x, eps)
    p = box.dim

    if inner == "vertex":
        if not isinstance(f, QuadraticObjective):
            raise SpecError("vertex enumeration needs a quadratic objective")
        f_x = f.value(x)
        # y -> f(x + A y) is again quadratic
        H, g = f.H, f.H @ x + f.g
        if not subspace.is_full:
            A = subspace.A
            H, g = _sym(A.T @ H @ A), A.T @ g
        _, best = boxmax.vertex_bruteforce_max(QuadraticObjective(H, g, f_x), box)
        best = max(best, f_x)
        diag = None
    elif inner == "lbfgsb":
        def restricted(y):
            value, grad = f(x + subspace.apply(y))
            return value, subspace.apply_t(np.asarray(grad, dtype=np.float64))

        oracle = ObjectiveOracle(restricted, p)
        f_x, _ = oracle(np.zeros(p))
        _, best, diag = boxmax.maximize(oracle, box, np.zeros(p), max_outer)
        rng = np.random.default_rng(restart_seed)
        for _ in range(restarts):
            z0 = rng.uniform(box.lower, box.upper)
            _, val, d = boxmax.maximize(oracle, box, z0, max_outer)
            if val > best:
                best = val
            diag = Diagnostics(diag.iterations + d.iterations, oracle.calls, d.projected_grad_norm,
                               diag.start_value)
        best = max(best, f_x)
    else:
        raise SpecError(f"unknown inner solver {inner!r}")

    phi = (best - f_x) / (1.0 + f_x) * 100.0
    return SharpnessReport(phi, eps, subspace.label(), p, subspace.seed, f_x, best, diag)


def _sym(M):
    return 0.5 * (M + M.T)


def network_oracle(spec, params, dataset, workers: int = 1) -> LossOracle:
    """Full-training-set Eval-mode loss as a function of the flat weights (buffers frozen)."""
    from . import net

    def f(values):
        return net.loss_and_grad(spec, params.with_values(values), dataset.features, dataset.labels,
                                 net.EvalMode.EVAL, workers)

    return f
