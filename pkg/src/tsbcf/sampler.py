"""Backfitting MCMC for the targeted smooth causal forest.

Latent model on the probit scale::

    f(t, x, z) = alpha_t + xi * mu(t, x, pi_hat) + (b1 * z + b0 * (1 - z)) * tau(t, x)

with ``mu`` and ``tau`` sums of curve-leaf trees. One iteration runs, in
order: latent draw, mu sweep, xi, Delta_mu, tau sweep, b1, b0, Delta_tau and
(continuous response only) sigma^2.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2, norm

from .config import ModelConfig
from .data import Dataset
from .kernel import KernelSpec, build_kernel, kappa_to_lengthscale
from .rng import RngStream, sample_inverse_gamma, sample_truncated_normal
from .trees import Forest

log = logging.getLogger(__name__)

B1_PRIOR = (0.5, 0.5)  # mean, variance
B0_PRIOR = (-0.5, 0.5)


class SamplerError(RuntimeError):
    pass


@dataclass
class Design:
    """Everything the chain needs from a Dataset, fixed for its lifetime."""

    y: np.ndarray
    z: np.ndarray
    t_idx: np.ndarray
    grid: np.ndarray
    X_mu: np.ndarray
    cat_mu: np.ndarray
    X_tau: np.ndarray
    cat_tau: np.ndarray
    z_col: int = -1  # column of z inside X_mu, or -1
    t_col_mu: int = -1  # column of t inside X_mu / X_tau when t is also a covariate
    t_col_tau: int = -1

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.grid.shape[0]


def build_design(d: Dataset, config: ModelConfig) -> Design:
    """Covariates: mu gets (x, pi_hat[, t][, z]); tau gets (x[, t])."""
    X, cat = d.X, d.is_categorical
    extra_mu, extra_tau = [], []
    if config.include_propensity:
        if d.pi_hat is None:
            raise ValueError("propensity scores are required for the mu forest (include_propensity)")
        extra_mu.append(d.pi_hat)
    t_col_mu = t_col_tau = -1
    if config.target_as_covariate:
        t_col_mu = X.shape[1] + len(extra_mu)
        t_col_tau = X.shape[1]
        extra_mu.append(d.t)
        extra_tau.append(d.t)
    z_col = -1
    if config.z_in_mu:
        z_col = X.shape[1] + len(extra_mu)
        extra_mu.append(d.z.astype(float))

    def stack(extra):
        if not extra:
            return X, cat
        return np.column_stack([X, *extra]), np.concatenate([cat, np.zeros(len(extra), bool)])

    X_mu, cat_mu = stack(extra_mu)
    X_tau, cat_tau = stack(extra_tau)
    return Design(
        y=np.asarray(d.y, float), z=np.asarray(d.z, float), t_idx=d.t_idx, grid=d.grid.values,
        X_mu=X_mu, cat_mu=cat_mu, X_tau=X_tau, cat_tau=cat_tau, z_col=z_col,
        t_col_mu=t_col_mu, t_col_tau=t_col_tau,
    )


@dataclass
class SamplerState:
    latent: np.ndarray
    alpha: np.ndarray
    xi: float
    b0: float
    b1: float
    delta_mu: float
    delta_tau: float
    sigma2: float
    mu_forest: Forest
    tau_forest: Forest | None
    sigma_lambda: float = 0.0

    @property
    def mu(self) -> np.ndarray:
        return self.mu_forest.fit

    @property
    def tau(self) -> np.ndarray:
        if self.tau_forest is None:
            return np.zeros_like(self.latent)
        return self.tau_forest.fit

    def bz(self, z) -> np.ndarray:
        return self.b1 * z + self.b0 * (1.0 - z)

    def fit(self, design: Design) -> np.ndarray:
        return self.alpha[design.t_idx] + self.xi * self.mu + self.bz(design.z) * self.tau

    def scalars(self) -> dict:
        return dict(xi=self.xi, b0=self.b0, b1=self.b1, delta_mu=self.delta_mu,
                    delta_tau=self.delta_tau, sigma2=self.sigma2)


@dataclass
class PosteriorDraws:
    """Retained draws.

    ``f0``/``f1`` are the latent fits with z set to 0/1 and always satisfy
    ``f(z) = alpha[t] + xi*mu + (b1*z + b0*(1-z))*tau``. When z enters the
    mu forest as a covariate (single-forest mode) ``mu`` holds the forest at
    z=0, ``tau`` the z=1 minus z=0 contrast, and the recorded b1, b0 are xi, 0.
    """

    mu: np.ndarray
    tau: np.ndarray
    f0: np.ndarray
    f1: np.ndarray
    alpha: np.ndarray
    t_idx: np.ndarray
    z: np.ndarray
    xi: np.ndarray
    b0: np.ndarray
    b1: np.ndarray
    delta_mu: np.ndarray
    delta_tau: np.ndarray
    sigma2: np.ndarray
    accept: dict = field(default_factory=dict)
    seed: int = 0
    wall_time: float = 0.0
    response_mode: str = "probit"
    state: SamplerState | None = field(default=None, repr=False)
    rr_curve: np.ndarray | None = None  # (draws, T) standardized RR by grid point, if requested

    @property
    def n_draws(self) -> int:
        return self.mu.shape[0]

    @property
    def n(self) -> int:
        return self.mu.shape[1]

    def recompute_f(self, z: int) -> np.ndarray:
        b = self.b1[:, None] * z + self.b0[:, None] * (1 - z)
        return self.alpha[self.t_idx][None, :] + self.xi[:, None] * self.mu + b * self.tau

    def p0(self) -> np.ndarray:
        return norm.cdf(self.f0)

    def p1(self) -> np.ndarray:
        return norm.cdf(self.f1)


# ----------------------------------------------------------------- setup


def clamped_rate(successes, n_t):
    n_t = np.asarray(n_t, float)
    rate = np.asarray(successes, float) / np.maximum(n_t, 1)
    return np.clip(rate, 1.0 / (n_t + 2), (n_t + 1) / (n_t + 2))


def estimate_alpha(y, t_idx, T: int, response_mode: str = "probit", pooled: bool = False) -> np.ndarray:
    """Per-grid-point offsets from the empirical rates (or means); ``pooled`` uses the overall one."""
    y = np.asarray(y, float)
    if pooled:
        t_idx = np.zeros_like(t_idx)
        one = estimate_alpha(y, t_idx, 1, response_mode)
        return np.full(T, one[0])
    n_t = np.bincount(t_idx, minlength=T)
    s_t = np.bincount(t_idx, weights=y, minlength=T)
    if response_mode == "continuous":
        glob = float(y.mean())
        return np.where(n_t > 0, s_t / np.maximum(n_t, 1), glob)
    glob = norm.ppf(clamped_rate(y.sum(), y.size))
    return np.where(n_t > 0, norm.ppf(clamped_rate(s_t, n_t)), glob)


def sigma_lambda(design: Design, nu: float, q: float) -> float:
    """Scale such that P(sigma <= sigma_hat) = q under the IG(nu/2, nu*lambda/2) prior."""
    A = np.column_stack([np.ones(design.n), design.X_mu, design.grid[design.t_idx]])
    coef, *_ = np.linalg.lstsq(A, design.y, rcond=None)
    resid = design.y - A @ coef
    dof = max(design.n - np.linalg.matrix_rank(A), 1)
    s2_hat = float(resid @ resid) / dof
    if not s2_hat > 0:
        s2_hat = float(np.var(design.y)) or 1.0
    return s2_hat * chi2.ppf(1 - q, nu) / nu


def _lengthscale(explicit, kappa, grid):
    return explicit if explicit is not None else kappa_to_lengthscale(kappa, grid)


def make_forests(design: Design, config: ModelConfig):
    g = design.grid
    kmu = build_kernel(KernelSpec(g, config.s_mu ** 2, config.n_mu, 1.0,
                                  _lengthscale(config.lengthscale_mu, config.kappa_mu, g)),
                       config.jitter)
    mu = Forest(config.n_mu, design.X_mu, design.cat_mu, design.t_idx, kmu,
                config.eta_mu, config.beta_mu, config.max_nodes)
    tau = None
    if config.use_tau_forest:
        ktau = build_kernel(KernelSpec(g, config.s_tau ** 2, config.n_tau, 1.0,
                                       _lengthscale(config.lengthscale_tau, config.kappa_tau, g)),
                            config.jitter)
        tau = Forest(config.n_tau, design.X_tau, design.cat_tau, design.t_idx, ktau,
                     config.eta_tau, config.beta_tau, config.max_nodes)
    return mu, tau


def init_state(design: Design, config: ModelConfig, rng: np.random.Generator,
               alpha: np.ndarray | None = None) -> SamplerState:
    mu, tau = make_forests(design, config)
    if alpha is None:
        alpha = estimate_alpha(design.y, design.t_idx, design.T, config.response_mode,
                               pooled=config.offset_mode == "pooled")
    has_b = config.use_tau_forest
    state = SamplerState(
        latent=np.zeros(design.n),
        alpha=np.asarray(alpha, float).copy(),
        xi=1.0,
        b0=B0_PRIOR[0] if has_b else 0.0,
        b1=B1_PRIOR[0] if has_b else 0.0,
        delta_mu=1.0,
        delta_tau=1.0,
        sigma2=1.0,
        mu_forest=mu,
        tau_forest=tau,
    )
    if config.response_mode == "continuous":
        state.sigma_lambda = sigma_lambda(design, config.sigma_nu, config.sigma_q)
        state.sigma2 = float(np.var(design.y - state.alpha[design.t_idx])) or 1.0
    update_latents(state, design, rng)
    return state


# ----------------------------------------------------------------- updates


def update_latents(state: SamplerState, design: Design, rng: np.random.Generator):
    """Probit augmentation: latent ~ N(f, sigma^2) truncated to the sign of y.

    In continuous mode the latent response is the outcome itself.
    """
    if state.sigma_lambda > 0:
        state.latent = design.y.copy()
        return
    f = state.fit(design)
    state.latent = sample_truncated_normal(f, math.sqrt(state.sigma2), design.y > 0.5, rng)


def sweep_mu_forest(state: SamplerState, design: Design, rng: np.random.Generator,
                    use_likelihood: bool = True) -> np.ndarray:
    """Working data (latent - alpha - b*tau) / xi with variance sigma^2 / xi^2."""
    target = state.latent - state.alpha[design.t_idx] - state.bz(design.z) * state.tau
    a = np.full(design.n, state.xi)
    state.mu_forest.delta = state.delta_mu
    return state.mu_forest.sweep(target, a, 1.0 / state.sigma2, rng, use_likelihood)


def sweep_tau_forest(state: SamplerState, design: Design, rng: np.random.Generator,
                     use_likelihood: bool = True) -> np.ndarray:
    """Working data (latent - alpha - xi*mu) / b_z with precision b_z^2 / sigma^2."""
    target = state.latent - state.alpha[design.t_idx] - state.xi * state.mu
    a = state.bz(design.z)
    state.tau_forest.delta = state.delta_tau
    return state.tau_forest.sweep(target, a, 1.0 / state.sigma2, rng, use_likelihood)


def normal_regression_draw(x, e, sigma2, prior_mean, prior_var, rng):
    """Draw c from its posterior under e = c*x + N(0, sigma2), c ~ N(prior_mean, prior_var).

    Returns (draw, posterior mean, posterior variance).
    """
    prec = 1.0 / prior_var + float(x @ x) / sigma2
    v = 1.0 / prec
    m = v * (prior_mean / prior_var + float(x @ e) / sigma2)
    return m + math.sqrt(v) * rng.standard_normal(), m, v


def gibbs_xi(state: SamplerState, design: Design, rng: np.random.Generator) -> float:
    e = state.latent - state.alpha[design.t_idx] - state.bz(design.z) * state.tau
    state.xi, _, _ = normal_regression_draw(state.mu, e, state.sigma2, 0.0, 1.0, rng)
    return state.xi


def gibbs_b(state: SamplerState, design: Design, arm: str, rng: np.random.Generator) -> float:
    if arm not in ("treated", "control"):
        raise ValueError(f"unknown arm {arm!r}")
    sel = design.z > 0.5 if arm == "treated" else design.z < 0.5
    e = state.latent - state.alpha[design.t_idx] - state.xi * state.mu
    pm, pv = B1_PRIOR if arm == "treated" else B0_PRIOR
    draw, _, _ = normal_regression_draw(state.tau[sel], e[sel], state.sigma2, pm, pv, rng)
    if arm == "treated":
        state.b1 = draw
    else:
        state.b0 = draw
    return draw


def delta_posterior(forest: Forest, nu: float) -> tuple[float, float]:
    """(shape, scale) of the inverse-gamma full conditional of 1/Delta."""
    ssq, n_bots = forest.delta_ssq()
    return (nu + n_bots * forest.kernel.dim) / 2.0, (nu + ssq) / 2.0


def gibbs_delta(state: SamplerState, which: str, rng: np.random.Generator, nu: float) -> float:
    if which not in ("mu", "tau"):
        raise ValueError(f"unknown forest {which!r}")
    forest = state.mu_forest if which == "mu" else state.tau_forest
    shape, scale = delta_posterior(forest, nu)
    delta = 1.0 / float(sample_inverse_gamma(shape, scale, rng))
    setattr(state, f"delta_{which}", delta)
    forest.delta = delta
    return delta


def gibbs_sigma2(state: SamplerState, design: Design, rng: np.random.Generator, nu: float) -> float:
    if not state.sigma_lambda > 0:
        raise SamplerError("sigma^2 is fixed at 1 in probit mode")
    r = state.latent - state.fit(design)
    rss = float(r @ r)
    state.sigma2 = float(sample_inverse_gamma((nu + design.n) / 2.0, (rss + nu * state.sigma_lambda) / 2.0, rng))
    return state.sigma2


# ----------------------------------------------------------------- chain


def _check_finite(state: SamplerState, it: int):
    bad = [k for k, v in state.scalars().items() if not math.isfinite(v)]
    if not np.all(np.isfinite(state.latent)):
        bad.append("latent")
    if not np.all(np.isfinite(state.mu)):
        bad.append("mu")
    if not np.all(np.isfinite(state.tau)):
        bad.append("tau")
    if bad:
        raise SamplerError(f"non-finite state at iteration {it}: {', '.join(bad)}")


def iterate(state: SamplerState, design: Design, config: ModelConfig, rng: np.random.Generator,
            counts: dict | None = None):
    """One full scan of the Gibbs sampler."""
    update_latents(state, design, rng)
    c = sweep_mu_forest(state, design, rng)
    if counts is not None:
        counts["mu"] += c
    if config.update_xi:
        gibbs_xi(state, design, rng)
    if config.mu_scale_mode == "half-cauchy":
        gibbs_delta(state, "mu", rng, config.nu_mu)
    if state.tau_forest is not None:
        c = sweep_tau_forest(state, design, rng)
        if counts is not None:
            counts["tau"] += c
        gibbs_b(state, design, "treated", rng)
        gibbs_b(state, design, "control", rng)
        if config.tau_scale_mode == "half-cauchy":
            gibbs_delta(state, "tau", rng, config.nu_tau)
    if config.response_mode == "continuous":
        gibbs_sigma2(state, design, rng, config.sigma_nu)


def _rates(c):
    return {
        "grow_proposed": int(c[0]), "grow_accepted": int(c[1]),
        "prune_proposed": int(c[2]), "prune_accepted": int(c[3]),
        "grow_rate": float(c[1] / c[0]) if c[0] else 0.0,
        "prune_rate": float(c[3] / c[2]) if c[2] else 0.0,
    }


def counterfactual_f(state: SamplerState, design: Design, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Latent fits (z=0, z=1) for every unit moved to grid point ``t``, covariates otherwise kept."""
    n = design.n
    tt = np.full(n, t, dtype=np.int64)
    Xm = design.X_mu.copy()
    if design.t_col_mu >= 0:
        Xm[:, design.t_col_mu] = design.grid[t]
    a = state.alpha[t]
    if design.z_col >= 0:
        Xm[:, design.z_col] = 0.0
        mu0 = state.mu_forest.predict(Xm, tt)
        Xm[:, design.z_col] = 1.0
        mu1 = state.mu_forest.predict(Xm, tt)
        return a + state.xi * mu0, a + state.xi * mu1
    mu = state.mu_forest.predict(Xm, tt)
    if state.tau_forest is None:
        f = a + state.xi * mu
        return f, f
    Xt = design.X_tau.copy()
    if design.t_col_tau >= 0:
        Xt[:, design.t_col_tau] = design.grid[t]
    tau = state.tau_forest.predict(Xt, tt)
    base = a + state.xi * mu
    return base + state.b0 * tau, base + state.b1 * tau


def standardized_rr_curve(state: SamplerState, design: Design) -> np.ndarray:
    """Mean over all units of Phi(f1)/Phi(f0) with each unit placed at each grid point."""
    out = np.empty(design.T)
    for t in range(design.T):
        f0, f1 = counterfactual_f(state, design, t)
        out[t] = float(np.mean(norm.cdf(f1) / norm.cdf(f0)))
    return out


def run_chain(d: Dataset, config: ModelConfig, rng: np.random.Generator | None = None,
              alpha: np.ndarray | None = None, callback=None, rr_curve: bool = False) -> PosteriorDraws:
    """Run burn-in plus ``n_draws * thin`` iterations and keep every ``thin``-th.

    ``rr_curve=True`` also records the standardized RR-by-grid-point curve per draw.
    """
    config.validate()
    if config.response_mode == "probit" and d.outcome_kind != "binary":
        raise ValueError("probit mode needs a binary outcome")
    rng = RngStream(config.seed).generator if rng is None else rng
    t0 = time.perf_counter()
    design = build_design(d, config)
    state = init_state(design, config, rng, alpha)
    n, S = design.n, config.n_draws
    out = {k: np.empty((S, n)) for k in ("mu", "tau", "f0", "f1")}
    tr = {k: np.empty(S) for k in ("xi", "b0", "b1", "delta_mu", "delta_tau", "sigma2")}
    counts = {"mu": np.zeros(4, np.int64), "tau": np.zeros(4, np.int64)}
    curve = np.empty((S, design.T)) if rr_curve else None
    X0 = X1 = None
    if design.z_col >= 0:
        X0 = design.X_mu.copy()
        X0[:, design.z_col] = 0.0
        X1 = design.X_mu.copy()
        X1[:, design.z_col] = 1.0
    total = config.n_burn + S * config.thin
    s = 0
    for it in range(total):
        iterate(state, design, config, rng, counts)
        _check_finite(state, it)
        if callback is not None:
            callback(it, state)
        if it < config.n_burn or (it - config.n_burn + 1) % config.thin:
            continue
        a_t = state.alpha[design.t_idx]
        rec = state.scalars()
        if X0 is not None:
            mu0 = state.mu_forest.predict(X0, design.t_idx)
            mu1 = state.mu_forest.predict(X1, design.t_idx)
            mu, tau = mu0, mu1 - mu0
            rec["b1"], rec["b0"] = state.xi, 0.0
        else:
            mu, tau = state.mu.copy(), state.tau.copy()
        out["mu"][s] = mu
        out["tau"][s] = tau
        out["f0"][s] = a_t + rec["xi"] * mu + rec["b0"] * tau
        out["f1"][s] = a_t + rec["xi"] * mu + rec["b1"] * tau
        for k in tr:
            tr[k][s] = rec[k]
        if curve is not None:
            curve[s] = standardized_rr_curve(state, design)
        s += 1
    accept = {"mu": _rates(counts["mu"])}
    if state.tau_forest is not None:
        accept["tau"] = _rates(counts["tau"])
    return PosteriorDraws(
        **out, alpha=state.alpha.copy(), t_idx=design.t_idx.copy(), z=design.z.copy(), **tr,
        accept=accept, seed=config.seed, wall_time=time.perf_counter() - t0,
        response_mode=config.response_mode, state=state, rr_curve=curve,
    )
