"""Squared-exponential leaf covariance over the target grid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class SingularKernelError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    """Leaf-curve prior ``N(0, C)`` with C = s2/(n_trees*delta) * exp(-0.5*((t-t')/l)^2).

    ``lengthscale=math.inf`` is the constant-leaf limit: every leaf curve is
    a single scalar repeated over the grid.
    """

    grid: np.ndarray
    s2: float
    n_trees: int
    delta: float = 1.0
    lengthscale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "grid", np.asarray(getattr(self.grid, "values", self.grid), float))
        for name in ("s2", "delta", "lengthscale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")

    @property
    def scale(self) -> float:
        return self.s2 / (self.n_trees * self.delta)

    @property
    def constant(self) -> bool:
        return math.isinf(self.lengthscale) or self.grid.size == 1


@dataclass(frozen=True)
class FactoredKernel:
    """Covariance with cached factorizations.

    In the constant-leaf case ``C`` is rank one, ``K`` is None, ``chol_C``
    is the rank-one factor (first column only) and ``dim`` is 1.
    """

    C: np.ndarray
    K: np.ndarray | None
    chol_C: np.ndarray
    logdet_K: float
    scale: float
    dim: int
    base: np.ndarray  # C before jitter
    jitter: float

    @property
    def T(self) -> int:
        return self.C.shape[0]

    def quad_form(self, m: np.ndarray) -> np.ndarray:
        """``m^T C^{-1} m`` for each row of ``m`` (restricted to the range of C)."""
        m = np.atleast_2d(m)
        if self.K is None:
            return m[:, 0] ** 2 / self.scale
        w = np.linalg.solve(self.chol_C, m.T)
        return np.sum(w * w, axis=0)


def se_correlation(grid: np.ndarray, lengthscale: float) -> np.ndarray:
    g = np.asarray(grid, float)
    if math.isinf(lengthscale):
        return np.ones((g.size, g.size))
    d = (g[:, None] - g[None, :]) / lengthscale
    return np.exp(-0.5 * d * d)


def build_kernel(spec: KernelSpec, jitter: float = 1e-8) -> FactoredKernel:
    v = spec.scale
    T = spec.grid.size
    base = v * se_correlation(spec.grid, spec.lengthscale)
    if spec.constant:
        L = np.zeros((T, T))
        L[:, 0] = math.sqrt(v)
        K = None if T > 1 else np.array([[1.0 / v]])
        logdet = -math.log(v)
        return FactoredKernel(base.copy(), K, L, logdet, v, 1, base, 0.0)
    jit = jitter
    for _ in range(4):
        C = base + jit * v * np.eye(T)
        try:
            L = np.linalg.cholesky(C)
        except np.linalg.LinAlgError:
            jit *= 10
            continue
        Linv = np.linalg.solve(L, np.eye(T))
        K = Linv.T @ Linv
        logdet = -2.0 * float(np.sum(np.log(np.diag(L))))
        return FactoredKernel(C, K, L, logdet, v, T, base, jit)
    raise SingularKernelError(f"kernel factorization failed with jitter up to {jit / 10:g}")


def kappa_to_lengthscale(kappa: float, grid) -> float:
    """Length-scale ``range / kappa``; a single-point grid gives the constant limit."""
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    g = np.asarray(getattr(grid, "values", grid), float)
    rng = float(g.max() - g.min()) if g.size else 0.0
    if rng == 0.0:
        return math.inf
    return rng / kappa
