import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import kstest, norm, invgamma

from oracles import grid_normal_posterior
from tsbcf.config import ModelConfig
from tsbcf.data import Dataset, TargetGrid
from tsbcf.sampler import (
    B0_PRIOR, B1_PRIOR, SamplerError, build_design, clamped_rate, delta_posterior, estimate_alpha,
    gibbs_b, gibbs_delta, gibbs_sigma2, gibbs_xi, init_state, normal_regression_draw, run_chain,
    sweep_mu_forest, sweep_tau_forest, update_latents,
)
from tsbcf.trees import LeafSuffStats, leaf_posterior


def toy_data(rng, n=40, T=3, p=2, pi=True, outcome="binary"):
    y = rng.integers(0, 2, n) if outcome == "binary" else rng.normal(size=n)
    return Dataset(y=y, z=rng.integers(0, 2, n), t_idx=rng.integers(0, T, n), X=rng.normal(size=(n, p)),
                   grid=TargetGrid(np.linspace(0, 1, T)), pi_hat=rng.uniform(0.2, 0.8, n) if pi else None,
                   outcome_kind=outcome)


def toy_state(rng, n=40, cfg=None, **kw):
    cfg = cfg or ModelConfig(n_mu=5, n_tau=3)
    d = toy_data(rng, n, **kw)
    design = build_design(d, cfg)
    return init_state(design, cfg, rng), design, cfg


# ---------------------------------------------------------------- setup

def test_alpha_from_rates():
    y = np.r_[np.ones(70), np.zeros(30), np.ones(10)]
    t = np.r_[np.zeros(100, int), np.ones(10, int)]
    a = estimate_alpha(y, t, 3)
    assert a[0] == pytest.approx(norm.ppf(0.7))
    assert a[0] == pytest.approx(0.5244, abs=1e-4)
    assert a[1] == pytest.approx(norm.ppf(11 / 12))
    assert a[2] == pytest.approx(norm.ppf(80 / 110))  # empty point falls back to the pooled rate
    assert clamped_rate(0, 5) == pytest.approx(1 / 7)
    assert np.allclose(estimate_alpha(y, t, 3, pooled=True), norm.ppf(80 / 110))


def test_pooled_offset_mode(rng):
    state, design, _ = toy_state(rng, cfg=ModelConfig(n_mu=5, n_tau=3, offset_mode="pooled"))
    assert np.ptp(state.alpha) == 0.0
    with pytest.raises(Exception):
        ModelConfig(offset_mode="smooth").validate()


def test_initial_b_values(rng):
    state, _, _ = toy_state(rng)
    assert (state.b1, state.b0) == (0.5, -0.5)
    assert state.b1 - state.b0 == 1.0
    # b = b1 - b0 has prior mean 1 and variance 1
    assert B1_PRIOR[0] - B0_PRIOR[0] == 1.0 and B1_PRIOR[1] + B0_PRIOR[1] == 1.0


def test_design_covariates(rng):
    d = toy_data(rng, p=3)
    assert build_design(d, ModelConfig()).X_mu.shape[1] == 4
    assert build_design(d, ModelConfig()).X_tau.shape[1] == 3
    bart = build_design(d, ModelConfig(z_in_mu=True, use_tau_forest=False, target_as_covariate=True))
    assert bart.X_mu.shape[1] == 3 + 3 and bart.z_col == 5
    with pytest.raises(ValueError):
        build_design(toy_data(rng, pi=False), ModelConfig())


# ---------------------------------------------------------------- latents

def test_latent_signs_follow_outcome(rng):
    state, design, _ = toy_state(rng)
    for _ in range(20):
        update_latents(state, design, rng)
        assert np.all((state.latent > 0) == (design.y > 0.5))


def test_latent_half_normal_mean(rng):
    n = 100_000
    d = Dataset(y=np.ones(n, int), z=np.zeros(n, int), t_idx=np.zeros(n, int), X=np.zeros((n, 1)),
                grid=TargetGrid([0.0]))
    cfg = ModelConfig(n_mu=1, use_tau_forest=False, include_propensity=False)
    design = build_design(d, cfg)
    state = init_state(design, cfg, rng, alpha=np.zeros(1))
    update_latents(state, design, rng)
    assert abs(state.latent.mean() - math.sqrt(2 / math.pi)) < 0.01


# ---------------------------------------------------------------- working data

class Capture:
    def __call__(self, target, a, prec, rng, use_likelihood=True):
        self.target, self.a, self.prec = np.array(target), np.array(a), prec
        return np.zeros(4, np.int64)


def test_mu_working_data(rng):
    state, design, _ = toy_state(rng)
    state.alpha[:] = 0
    state.tau_forest.fit[:] = 0
    cap = Capture()
    state.mu_forest.sweep = cap
    sweep_mu_forest(state, design, rng)
    assert np.array_equal(cap.target / cap.a, state.latent)
    state.xi = 2.0
    sweep_mu_forest(state, design, rng)
    assert np.allclose(1.0 / (cap.prec * cap.a ** 2), 0.25)


def test_tau_working_data(rng):
    state, design, _ = toy_state(rng)
    state.alpha[:] = 0
    state.mu_forest.fit[:] = 0
    cap = Capture()
    state.tau_forest.sweep = cap
    sweep_tau_forest(state, design, rng)
    assert np.allclose(cap.prec * cap.a ** 2, 0.25)
    sign = np.where(design.z > 0.5, 0.5, -0.5)
    assert np.allclose(cap.target / cap.a, state.latent / sign)


def test_root_sweep_draws_match_leaf_posterior(rng):
    # constant covariates keep the single tree at its root
    n = 12
    d = Dataset(y=rng.integers(0, 2, n), z=np.zeros(n, int), t_idx=np.arange(n) % 3, X=np.ones((n, 1)),
                grid=TargetGrid([0.0, 0.5, 1.0]))
    cfg = ModelConfig(n_mu=1, use_tau_forest=False, include_propensity=False)
    design = build_design(d, cfg)
    state = init_state(design, cfg, rng)
    state.xi = 1.7
    target = rng.normal(size=n)
    a = np.full(n, state.xi)
    draws = []
    for _ in range(10_000):
        state.mu_forest.sweep(target, a, 1.0, rng)
        draws.append(state.mu_forest.curves[0, 0].copy())
    draws = np.array(draws)
    stats = LeafSuffStats.from_residuals(target / a, design.t_idx, 3, a * a)
    m, c = leaf_posterior(stats, state.mu_forest.kernel)
    se = np.sqrt(np.diag(c) / len(draws))
    assert np.all(np.abs(draws.mean(0) - m) < 4 * se)
    d = np.diag(c)
    cov_se = np.sqrt((np.outer(d, d) + c ** 2) / len(draws))
    assert np.all(np.abs(np.cov(draws.T) - c) < 4 * cov_se)


# ---------------------------------------------------------------- scalar updates

def test_normal_regression_single_obs(rng):
    _, m, v = normal_regression_draw(np.array([1.0]), np.array([2.0]), 1.0, 0.0, 1.0, rng)
    assert (m, v) == pytest.approx((1.0, 0.5))
    _, m, v = normal_regression_draw(np.zeros(0), np.zeros(0), 1.0, 0.0, 1.0, rng)
    assert (m, v) == (0.0, 1.0)
    # b1 prior N(.5, .5), one treated unit with tau=1 and residual 1
    _, m, v = normal_regression_draw(np.array([1.0]), np.array([1.0]), 1.0, *B1_PRIOR, rng)
    assert (m, v) == pytest.approx((2 / 3, 1 / 3))


@given(st.integers(1, 30), st.floats(0.1, 5), st.floats(-2, 2), st.floats(0.1, 3), st.integers(0, 2**31))
def test_normal_regression_matches_grid_integration(n, s2, m0, v0, seed):
    g = np.random.default_rng(seed)
    x = g.normal(size=n)
    e = 0.7 * x + g.normal(scale=math.sqrt(s2), size=n)
    _, m, v = normal_regression_draw(x, e, s2, m0, v0, g)
    mg, vg = grid_normal_posterior(x, e, s2, m0, v0, n=20001)
    assert m == pytest.approx(mg, abs=1e-6 * max(1, abs(mg)))
    assert v == pytest.approx(vg, rel=1e-5)


def test_b_prior_fallback_without_treated(rng):
    state, design, _ = toy_state(rng)
    design.z[:] = 0
    draws = np.array([gibbs_b(state, design, "treated", rng) for _ in range(10_000)])
    assert abs(draws.mean() - 0.5) < 3 * math.sqrt(0.5 / 10_000)
    with pytest.raises(ValueError):
        gibbs_b(state, design, "both", rng)


def test_delta_posterior_arithmetic(rng):
    n = 5
    d = Dataset(y=np.ones(n, int), z=np.zeros(n, int), t_idx=np.zeros(n, int), X=np.ones((n, 1)),
                grid=TargetGrid([0.0]))
    cfg = ModelConfig(n_mu=1, use_tau_forest=False, include_propensity=False)
    state = init_state(build_design(d, cfg), cfg, rng)
    assert delta_posterior(state.mu_forest, 1.0) == (1.0, 0.5)  # zero curves
    v = state.mu_forest.kernel.scale
    state.mu_forest.curves[0, 0, 0] = math.sqrt(3 * v)
    assert delta_posterior(state.mu_forest, 1.0) == pytest.approx((1.0, 2.0))


def test_delta_prior_recovery(rng):
    n = 30
    d = Dataset(y=np.ones(n, int), z=np.zeros(n, int), t_idx=np.zeros(n, int),
                X=rng.normal(size=(n, 1)), grid=TargetGrid([0.0]))
    cfg = ModelConfig(n_mu=1, use_tau_forest=False, include_propensity=False)
    design = build_design(d, cfg)
    state = init_state(design, cfg, rng)
    keep = []
    zero = np.zeros(n)
    for it in range(30_000):
        state.mu_forest.delta = state.delta_mu
        state.mu_forest.sweep(zero, np.ones(n), 1.0, rng, use_likelihood=False)
        gibbs_delta(state, "mu", rng, 1.0)
        if it >= 1000 and it % 10 == 0:
            keep.append(1.0 / state.delta_mu)
    assert kstest(keep, invgamma(0.5, scale=0.5).cdf).pvalue > 0.01


def test_sigma2_fixed_in_probit_mode(rng):
    state, design, cfg = toy_state(rng, n=60)
    with pytest.raises(SamplerError):
        gibbs_sigma2(state, design, rng, 3.0)
    draws = run_chain(toy_data(rng, n=60), cfg.updated(n_burn=5, n_draws=10), rng)
    assert np.all(draws.sigma2 == 1.0)


def test_sigma2_recovers_noise_level(rng):
    n = 2000
    X = rng.normal(size=(n, 2))
    t_idx = rng.integers(0, 4, n)
    y = 0.3 * X[:, 0] + rng.normal(scale=0.5, size=n)
    d = Dataset(y=y, z=np.zeros(n, int), t_idx=t_idx, X=X, grid=TargetGrid(np.arange(4.0)),
                outcome_kind="continuous")
    cfg = ModelConfig(n_mu=30, use_tau_forest=False, include_propensity=False, response_mode="continuous",
                      n_burn=150, n_draws=150)
    draws = run_chain(d, cfg, rng)
    assert 0.22 <= draws.sigma2.mean() <= 0.28


def test_chain_is_deterministic(rng):
    d = toy_data(rng, n=50)
    cfg = ModelConfig(n_mu=10, n_tau=5, n_burn=10, n_draws=10, seed=4)
    a, b = run_chain(d, cfg), run_chain(d, cfg)
    for k in ("mu", "tau", "f0", "f1", "xi", "b0", "b1", "delta_mu"):
        assert np.array_equal(getattr(a, k), getattr(b, k))


def test_draws_decomposition_identity(rng):
    d = toy_data(rng, n=50)
    for cfg in (ModelConfig(n_mu=10, n_tau=5, n_burn=5, n_draws=8),
                ModelConfig(n_mu=10, n_burn=5, n_draws=8, use_tau_forest=False, z_in_mu=True,
                            target_as_covariate=True, update_xi=False, mu_scale_mode="fixed")):
        dr = run_chain(d, cfg, rng)
        assert np.max(np.abs(dr.recompute_f(0) - dr.f0)) <= 1e-10
        assert np.max(np.abs(dr.recompute_f(1) - dr.f1)) <= 1e-10


def test_non_finite_state_raises(rng, monkeypatch):
    d = toy_data(rng, n=30)
    cfg = ModelConfig(n_mu=5, n_tau=3, n_burn=3, n_draws=3)

    def poison(state, design, rng):
        state.xi = math.nan

    monkeypatch.setattr("tsbcf.sampler.gibbs_xi", poison)
    with pytest.raises(SamplerError, match="non-finite state at iteration 0"):
        run_chain(d, cfg, rng)


def test_constant_effect_scenario_covers(rng):
    from tsbcf.estimands import rr_draws
    from tsbcf.simbench import ScenarioSpec, gen_dataset

    d, truth = gen_dataset(ScenarioSpec("E", n=500), rng)
    d = d.with_propensity(np.clip(truth.pi, 0.01, 0.99))
    cfg = ModelConfig(n_mu=60, n_tau=20, n_burn=250, n_draws=250)
    rr = rr_draws(run_chain(d, cfg, rng)).rr
    lo, hi = np.quantile(rr, [0.025, 0.975], axis=0)
    assert np.mean((lo <= truth.rr) & (truth.rr <= hi)) >= 0.90
