"""Seeded random streams and the samplers used by the Gibbs updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, ndtri

# Standardized truncation points beyond this use exponential rejection.
TAIL_SWITCH = 8.0


@dataclass
class RngStream:
    """A reproducible generator keyed by ``(seed, stream_id)``."""

    seed: int
    stream_id: int = 0
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id),))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, *key: int) -> np.random.Generator:
        """Independent generator for a sub-task, e.g. ``(replicate, model)``."""
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id), *map(int, key)))
        return np.random.Generator(np.random.PCG64(ss))


def _tail_exponential(a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # Robert (1995) translated-exponential proposal for Z > a, a large.
    out = np.empty_like(a)
    todo = np.arange(a.size)
    while todo.size:
        aa = a[todo]
        lam = 0.5 * (aa + np.sqrt(aa * aa + 4.0))
        x = aa + rng.standard_exponential(todo.size) / lam
        u = rng.random(todo.size)
        ok = np.log(u) <= -0.5 * (x - lam) ** 2
        out[todo[ok]] = x[ok]
        todo = todo[~ok]
    return out


def standard_normal_above(a, rng: np.random.Generator) -> np.ndarray:
    """Draw Z ~ N(0, 1) conditioned on Z > a (elementwise)."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    out = np.empty_like(a)
    tail = a > TAIL_SWITCH
    body = ~tail
    if np.any(body):
        ab = a[body]
        # Z = -Phi^{-1}(U * Phi(-a)) has survival Phi(-z)/Phi(-a) on (a, inf)
        logp = np.log(rng.random(ab.size)) + log_ndtr(-ab)
        z = -ndtri(np.exp(logp))
        out[body] = np.maximum(z, np.nextafter(ab, np.inf))
    if np.any(tail):
        out[tail] = _tail_exponential(a[tail], rng)
    return out


def sample_truncated_normal(mean, sd, side, rng: np.random.Generator) -> np.ndarray:
    """Normal draws truncated to ``(0, inf)`` or ``(-inf, 0)``.

    ``side`` is ``"above-zero"``, ``"below-zero"`` or a boolean array that is
    True where the draw must be positive. Broadcasts over ``mean`` and ``sd``.
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(sd))):
        raise ValueError("non-finite mean or sd")
    if np.any(sd <= 0):
        raise ValueError("sd must be positive")
    if isinstance(side, str):
        if side not in ("above-zero", "below-zero"):
            raise ValueError(f"unknown side {side!r}")
        positive = np.full(np.broadcast(mean, sd).shape, side == "above-zero")
    else:
        positive = np.asarray(side, dtype=bool)
    mean, sd, positive = np.broadcast_arrays(mean, sd, positive)
    shape = mean.shape
    mean, sd, positive = mean.ravel(), sd.ravel(), positive.ravel()
    sign = np.where(positive, 1.0, -1.0)
    # reflect below-zero draws so both cases are "standardized value above a"
    a = -sign * mean / sd
    z = standard_normal_above(a, rng)
    x = np.maximum(mean * sign + sd * z, np.finfo(float).tiny)
    return (sign * x).reshape(shape)


def sample_inverse_gamma(shape, scale, rng: np.random.Generator, size=None):
    """Inverse-gamma draw with mean ``scale / (shape - 1)``."""
    shape = np.asarray(shape, dtype=float)
    scale = np.asarray(scale, dtype=float)
    if np.any(shape <= 0) or np.any(scale <= 0):
        raise ValueError("inverse-gamma shape and scale must be positive")
    g = rng.gamma(shape, 1.0, size=size)
    return scale / g


def sample_mvn_cholesky(mean, chol_lower, rng: np.random.Generator | None = None, z=None):
    """Return ``mean + L @ z`` with ``z`` standard normal (drawn if not given)."""
    mean = np.asarray(mean, dtype=float)
    L = np.asarray(chol_lower, dtype=float)
    if L.ndim != 2 or L.shape[0] != L.shape[1] or L.shape[0] != mean.shape[-1]:
        raise ValueError("dimension mismatch between mean and factor")
    if np.any(np.triu(L, 1) != 0):
        raise ValueError("factor must be lower-triangular")
    if np.any(np.diag(L) <= 0):
        raise ValueError("factor must have a positive diagonal")
    if z is None:
        if rng is None:
            raise ValueError("need rng or z")
        z = rng.standard_normal(mean.shape)
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != mean.shape[-1]:
        raise ValueError("dimension mismatch between mean and normal inputs")
    return mean + z @ L.T
