"""Propensity scores from a probit sum-of-trees fit with constant leaves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .data import Covariate, Dataset, TargetGrid
from .sampler import run_chain

CLIP = (0.001, 0.999)


@dataclass
class PropensityFit:
    pi_hat: np.ndarray
    n_draws: int
    clip: tuple = CLIP


def propensity_config(n_trees: int = 200, n_burn: int = 500, n_draws: int = 500, seed: int = 0,
                      **kw) -> ModelConfig:
    """Single forest, leaf sd 3/(2*sqrt(n_trees)), no shrinkage update, no xi."""
    base = dict(
        n_mu=n_trees, s_mu=1.5, mu_scale_mode="fixed", use_tau_forest=False, update_xi=False,
        include_propensity=False, response_mode="probit", n_burn=n_burn, n_draws=n_draws, seed=seed,
    )
    base.update(kw)
    return ModelConfig(**base).validate()


def fit_propensity(d: Dataset, config: ModelConfig | None = None,
                   rng: np.random.Generator | None = None) -> PropensityFit:
    """Posterior-mean P(z=1 | x, t), clipped away from 0 and 1.

    The model is the main sampler on a one-point grid with covariates (x, t).
    """
    z = np.asarray(d.z)
    if z.min() == z.max():
        raise ValueError("no overlap: all units are in one treatment arm")
    config = config or propensity_config()
    X = np.column_stack([d.X, d.t])
    covs = tuple(d.covariates) + (Covariate("__target__"),)
    pd_ = Dataset(y=z, z=np.zeros_like(z), t_idx=np.zeros(d.n, dtype=np.int64), X=X,
                  grid=TargetGrid(np.array([0.0])), covariates=covs)
    draws = run_chain(pd_, config, rng)
    pi = np.clip(draws.p0().mean(axis=0), *CLIP)
    return PropensityFit(pi_hat=pi, n_draws=draws.n_draws)
