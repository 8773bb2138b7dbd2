import math

import numpy as np
import pytest
from scipy.stats import norm

from tsbcf.config import ConfigError, ModelConfig
from tsbcf.sampler import build_design, counterfactual_f, run_chain, standardized_rr_curve
from tsbcf.simbench import (
    GRID, MODELS, SCENARIOS, BenchmarkConfig, ScenarioSpec, gen_dataset, model_config, mu_true,
    propensity_true, replicate_metrics, roughness, run_benchmark, tau_true,
)


def test_true_surfaces():
    assert mu_true(1.0, 0.0, 0.0) == pytest.approx(0.25)
    assert tau_true("A", 1.0, 0.0) == pytest.approx(0.35)
    assert tau_true("B", 0.0, 1.0) == pytest.approx(0.45)
    assert tau_true("C", 0.5, 0.0) == pytest.approx(0.4 - 0.05 * math.sqrt(2) / 2)
    assert tau_true("D", 0.0, -1.0) == pytest.approx(0.05)
    assert np.all(tau_true("E", GRID, np.linspace(-3, 3, GRID.size)) == 0.1)
    with pytest.raises(ValueError):
        tau_true("F", 0.0, 0.0)


def test_propensity_surface():
    X = np.zeros((2, 5))
    X[0, 3], X[1, 3] = 1.0, -1.0
    pi = propensity_true(X, 0.25)
    assert pi == pytest.approx(norm.cdf([-0.75, 0.75]))
    assert ScenarioSpec("A").rho == 0.25


def test_generated_dataset(rng):
    d, truth = gen_dataset(ScenarioSpec("C", n=300), rng)
    assert d.n == 300 and d.p == 5 and len(d.grid) == 10
    assert np.all(truth.rr > 1)
    assert np.allclose(truth.rr, norm.cdf(truth.mu + truth.tau) / norm.cdf(truth.mu))


def test_model_modes():
    base = ModelConfig()
    c2 = model_config("tsBCF2", base)
    assert (c2.kappa_mu, c2.kappa_tau) == (1.0, 3.0)
    bcf = model_config("BCF-mode", base)
    assert math.isinf(bcf.lengthscale_mu) and math.isinf(bcf.lengthscale_tau)
    with pytest.raises(ValueError):
        model_config("GP", base)


def test_bart_mode_covariates(rng):
    d, truth = gen_dataset(ScenarioSpec("A", n=50), rng)
    design = build_design(d.with_propensity(truth.pi), model_config("BART-mode", ModelConfig()))
    # x, pi_hat, t, z: constant leaves, so t has to be a split variable
    assert design.X_mu.shape[1] == d.p + 3 and design.z_col == d.p + 2 and design.t_col_mu == d.p + 1
    assert math.isinf(model_config("BART-mode", ModelConfig()).lengthscale_mu)


@pytest.mark.parametrize("mode", ["tsBCF1", "BCF-mode", "BART-mode"])
def test_counterfactual_fits_match_at_observed_target(rng, mode):
    d, truth = gen_dataset(ScenarioSpec("C", n=120), rng)
    d = d.with_propensity(truth.pi)
    cfg = model_config(mode, ModelConfig(n_mu=10, n_tau=5, n_burn=15, n_draws=1))
    dr = run_chain(d, cfg, rng, rr_curve=True)
    design = build_design(d, cfg)
    for t in range(design.T):
        sel = design.t_idx == t
        f0, f1 = counterfactual_f(dr.state, design, t)
        assert np.allclose(f0[sel], dr.f0[-1, sel], atol=1e-10)
        assert np.allclose(f1[sel], dr.f1[-1, sel], atol=1e-10)
    assert dr.rr_curve.shape == (1, design.T)
    assert np.allclose(dr.rr_curve[-1], standardized_rr_curve(dr.state, design))


def test_roughness_of_lines_is_zero():
    assert roughness(np.linspace(1, 2, 10)) == pytest.approx(0.0, abs=1e-15)
    assert roughness([0.0, 1.0, 0.0]) == 2.0
    assert math.isnan(roughness([1.0, 2.0]))


def test_bcf_mode_leaves_are_flat(rng):
    d, truth = gen_dataset(ScenarioSpec("A", n=100), rng)
    cfg = model_config("BCF-mode", ModelConfig(n_mu=10, n_tau=5, n_burn=10, n_draws=2))
    st = run_chain(d.with_propensity(truth.pi), cfg, rng).state
    for forest in (st.mu_forest, st.tau_forest):
        assert np.max(np.ptp(forest.leaf_curves(), axis=1)) <= 1e-8


def test_metrics_on_exact_draws():
    f0 = np.tile([0.1, 0.5], (4, 1))
    f1 = f0 + 0.2
    d = type("D", (), {"f0": f0, "f1": f1})
    rr = norm.cdf(f1[0]) / norm.cdf(f0[0])
    m = replicate_metrics(d, rr)
    assert m["rmse"] == pytest.approx(0.0, abs=1e-15) and m["coverage"] == 1.0
    assert m["length"] == pytest.approx(0.0, abs=1e-15)


def test_config_validation():
    with pytest.raises(ConfigError):
        BenchmarkConfig(n_draws=0).validate()
    with pytest.raises(ConfigError):
        BenchmarkConfig(scenarios=["Z"]).validate()
    with pytest.raises(ConfigError):
        BenchmarkConfig.from_dict({"bogus": 1})
    assert BenchmarkConfig.from_dict(BenchmarkConfig().to_dict()).to_dict() == BenchmarkConfig().to_dict()


def test_default_table_shape():
    bc = BenchmarkConfig()
    assert len(bc.scenarios) * len(bc.models) == 20
    assert tuple(bc.scenarios) == SCENARIOS and tuple(bc.models) == MODELS


def test_small_benchmark_smoke():
    bc = BenchmarkConfig(scenarios=["E"], models=["BCF-mode"], replicates=2, n=200, n_burn=30, n_draws=30,
                         propensity_trees=10, propensity_burn=20, propensity_draws=20,
                         model={"n_mu": 20, "n_tau": 10})
    table, records = run_benchmark(bc)
    assert len(table) == 1 and len(records) == 2
    row = table[0]
    assert row.failures == 0
    assert all(math.isfinite(v) for v in (row.rmse, row.rmse_sd, row.coverage, row.interval_length))
