"""Prior leaf-scale selection and structural-heterogeneity summaries."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm

from .config import SPREAD_DIVISOR
from .data import Dataset

S_TAU_FLOOR = 0.01


@dataclass
class ScaleCalibration:
    s_mu: float
    s_tau: float
    lo: float
    hi: float
    divisor: float = SPREAD_DIVISOR
    holdout_size: int = 0
    target_sd: float = float("nan")
    fallback: bool = False
    trace: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "s_mu": self.s_mu, "s_tau": self.s_tau, "lo": self.lo, "hi": self.hi,
            "divisor": self.divisor, "holdout_size": self.holdout_size,
            "target_sd": None if math.isnan(self.target_sd) else self.target_sd,
            "fallback": self.fallback,
        }


def s_mu_from_elicitation(lo: float, hi: float, divisor: float = SPREAD_DIVISOR) -> float:
    """Leaf scale spanning the elicited baseline-risk range on the probit scale."""
    if not 0 < lo < hi < 1:
        raise ValueError(f"need 0 < lo < hi < 1, got lo={lo}, hi={hi}")
    if not divisor > 0:
        raise ValueError("divisor must be positive")
    return float((norm.ppf(hi) - norm.ppf(lo)) / divisor)


def implied_effect_sd(s_tau: float) -> float:
    """Prior SD of (b1 - b0) * tau at a point: b1 - b0 ~ N(1, 1) and tau ~ N(0, s_tau^2)."""
    return abs(s_tau) * math.sqrt(2.0)


def empirical_effect_sd(holdout: Dataset) -> float:
    """SD over grid points of Phi^-1(p1_t) - Phi^-1(p0_t), add-one smoothed rates.

    With baseline b_t = p0_t and relative risk r_t = p1_t / p0_t this is the
    spread of Phi^-1(r_t * b_t) - Phi^-1(b_t).
    """
    T = len(holdout.grid)
    y = holdout.y.astype(float)
    diffs = []
    for t in range(T):
        sel = holdout.t_idx == t
        y1, y0 = y[sel & (holdout.z == 1)], y[sel & (holdout.z == 0)]
        if y1.size == 0 or y0.size == 0:
            continue
        p1 = (y1.sum() + 1) / (y1.size + 2)
        p0 = (y0.sum() + 1) / (y0.size + 2)
        diffs.append(norm.ppf(p1) - norm.ppf(p0))
    if len(diffs) < 2:
        return float("nan")
    return float(np.std(diffs, ddof=1))


def s_tau_objective(s: float, target_sd: float) -> float:
    return abs(implied_effect_sd(s) - target_sd)


def s_tau_calibrate(holdout: Dataset, s_mu: float | None = None, lo: float = 0.860,
                    hi: float = 0.999, divisor: float = SPREAD_DIVISOR) -> ScaleCalibration:
    """Match the implied prior effect SD to the holdout's empirical effect SD.

    Nelder-Mead on a scalar, started at s_mu / 2; result floored at 0.01.
    Falls back to s_mu / 2 with a warning if the holdout has a single arm or
    fewer than two usable grid points.
    """
    s_mu = s_mu_from_elicitation(lo, hi, divisor) if s_mu is None else float(s_mu)
    out = ScaleCalibration(s_mu=s_mu, s_tau=s_mu / 2, lo=lo, hi=hi, divisor=divisor,
                           holdout_size=holdout.n)
    single_arm = holdout.z.min() == holdout.z.max()
    target = float("nan") if single_arm else empirical_effect_sd(holdout)
    if single_arm or math.isnan(target):
        warnings.warn("degenerate holdout for s_tau calibration; using s_mu / 2", RuntimeWarning,
                      stacklevel=2)
        out.fallback = True
        return out
    out.target_sd = target
    trace = out.trace

    def f(v):
        val = s_tau_objective(float(v[0]), target)
        trace.append((float(v[0]), val))
        return val

    res = minimize(f, x0=[s_mu / 2], method="Nelder-Mead",
                   options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 500})
    out.s_tau = max(abs(float(res.x[0])), S_TAU_FLOOR)
    return out


def _rr(alpha_t, xi, mu, b1, b0, tau):
    f1 = alpha_t + xi * mu + b1 * tau
    f0 = alpha_t + xi * mu + b0 * tau
    return norm.cdf(f1) / norm.cdf(f0)


def structural_heterogeneity_ratio(draws) -> float:
    """Mean over draws of Var_i(RR_i) / Var_i(RR_i with tau_i set to its draw mean).

    Draws with constant tau contribute exactly 1. Draws whose homogeneous
    variance is zero are dropped with a warning.
    """
    alpha_t = draws.alpha[draws.t_idx]
    ratios = []
    dropped = 0
    for b in range(draws.n_draws):
        tau = draws.tau[b]
        if np.all(tau == tau[0]):
            ratios.append(1.0)
            continue
        args = (alpha_t, draws.xi[b], draws.mu[b], draws.b1[b], draws.b0[b])
        v_het = np.var(_rr(*args, tau))
        v_hom = np.var(_rr(*args, np.full_like(tau, tau.mean())))
        if v_hom == 0:
            dropped += 1
            continue
        ratios.append(v_het / v_hom)
    if dropped:
        warnings.warn(f"{dropped} draw(s) with zero homogeneous variance excluded", RuntimeWarning,
                      stacklevel=2)
    if not ratios:
        return float("nan")
    return float(np.mean(ratios))


def structural_heterogeneity_grid(alphas, taus, mu_sds, n: int, rng: np.random.Generator) -> dict:
    """Long-format RR_i = Phi(alpha + mu_i + tau) / Phi(alpha + mu_i), mu_i ~ N(0, sd^2)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cols = {"alpha": [], "tau": [], "mu_sd": [], "rr": []}
    for a in alphas:
        for t in taus:
            for sd in mu_sds:
                mu = sd * rng.standard_normal(n)
                rr = norm.cdf(a + mu + t) / norm.cdf(a + mu)
                cols["alpha"].append(np.full(n, a, float))
                cols["tau"].append(np.full(n, t, float))
                cols["mu_sd"].append(np.full(n, sd, float))
                cols["rr"].append(rr)
    return {k: np.concatenate(v) if v else np.empty(0) for k, v in cols.items()}
