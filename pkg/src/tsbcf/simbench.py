"""Simulation benchmark: five treatment-effect scenarios, four model modes."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.stats import norm

from .config import ConfigError, ModelConfig
from .data import Dataset, TargetGrid
from .propensity import fit_propensity, propensity_config
from .rng import RngStream
from .sampler import run_chain

log = logging.getLogger(__name__)

SCENARIOS = ("A", "B", "C", "D", "E")
MODELS = ("tsBCF1", "tsBCF2", "BCF-mode", "BART-mode")
GRID = np.round(np.arange(1, 11) / 10.0, 10)


def mu_true(t, x1, x2):
    return 0.25 * np.asarray(t) ** 1.5 + np.asarray(x1) / 6 + np.asarray(x2) / 4


def tau_true(scenario: str, t, x3):
    t = np.asarray(t, float)
    x3 = np.asarray(x3, float)
    smooth = 0.2 * t - 0.05 * np.sin(1.5 * np.pi * t)
    hi = (x3 > 0.5).astype(float)
    mid = (x3 > -0.5).astype(float)
    if scenario == "A":
        return 0.1 + smooth
    if scenario == "B":
        return 0.1 + 0.2 * mid + 0.15 * hi + smooth
    if scenario == "C":
        return 0.1 + 0.2 * mid + (0.15 + 0.2 * t) * hi + smooth
    if scenario == "D":
        return 0.05 + 0.05 * mid + (0.15 + 0.2 * t) * hi + smooth
    if scenario == "E":
        return np.full(np.broadcast(t, x3).shape, 0.1)
    raise ValueError(f"unknown scenario {scenario!r}")


def propensity_true(X, rho: float, cut: float = 0.0):
    """Phi(rho*(x1/6 - x2/4) + (1 - rho)*s(x4)) with s = -1 above ``cut``, +1 otherwise."""
    X = np.asarray(X, float)
    s = np.where(X[:, 3] > cut, -1.0, 1.0)
    return norm.cdf(rho * (X[:, 0] / 6 - X[:, 1] / 4) + (1 - rho) * s)


@dataclass
class ScenarioSpec:
    id: str
    rho: float = 0.25
    n: int = 1000
    replicates: int = 10
    seed: int = 0
    cut: float = 0.0

    def __post_init__(self):
        if self.id not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.id!r}")
        if not 0 <= self.rho <= 1:
            raise ValueError("rho must be in [0, 1]")
        if self.n < 1:
            raise ValueError("n must be >= 1")


@dataclass
class Truth:
    rr: np.ndarray
    pi: np.ndarray
    mu: np.ndarray
    tau: np.ndarray


def gen_dataset(spec: ScenarioSpec, rng: np.random.Generator) -> tuple[Dataset, Truth]:
    n = spec.n
    X = rng.standard_normal((n, 5))
    t_idx = rng.integers(0, GRID.size, n)
    t = GRID[t_idx]
    pi = propensity_true(X, spec.rho, spec.cut)
    z = (rng.random(n) < pi).astype(int)
    mu = mu_true(t, X[:, 0], X[:, 1])
    tau = tau_true(spec.id, t, X[:, 2])
    y = (rng.random(n) < norm.cdf(mu + tau * z)).astype(int)
    rr = norm.cdf(mu + tau) / norm.cdf(mu)
    if not np.all(rr > 1):
        raise AssertionError("true relative risk must exceed 1 for positive latent effects")
    d = Dataset(y=y, z=z, t_idx=t_idx, X=X, grid=TargetGrid(GRID.copy()))
    return d, Truth(rr=rr, pi=pi, mu=mu, tau=tau)


def model_config(mode: str, base: ModelConfig) -> ModelConfig:
    """Sampler settings for each comparator."""
    if mode == "tsBCF1":
        return base.updated(kappa_mu=1.0, kappa_tau=1.0)
    if mode == "tsBCF2":
        return base.updated(kappa_mu=1.0, kappa_tau=3.0)
    if mode == "BCF-mode":
        return base.updated(lengthscale_mu=math.inf, lengthscale_tau=math.inf, target_as_covariate=True)
    if mode == "BART-mode":
        # ordinary probit BART on (x, pi_hat, t, z): constant leaves, fixed leaf scale
        return base.updated(
            use_tau_forest=False, z_in_mu=True, target_as_covariate=True, lengthscale_mu=math.inf,
            update_xi=False, mu_scale_mode="fixed", s_mu=1.5,
        )
    raise ValueError(f"unknown model mode {mode!r}")


def roughness(curve) -> float:
    """Mean absolute second difference of a curve over consecutive grid points."""
    curve = np.asarray(curve, float)
    if curve.size < 3:
        return math.nan
    return float(np.mean(np.abs(np.diff(curve, 2))))


def rr_curve_roughness(rr: np.ndarray, t_idx) -> float:
    """Roughness of the posterior-mean RR-by-target curve averaged over the units observed at each t."""
    t_idx = np.asarray(t_idx)
    return roughness([rr[:, t_idx == t].mean() for t in np.unique(t_idx)])


def replicate_metrics(draws, truth_rr) -> dict:
    rr = norm.cdf(draws.f1) / norm.cdf(draws.f0)
    est = rr.mean(axis=0)
    lo, hi = np.quantile(rr, [0.025, 0.975], axis=0)
    out = {
        "rmse": float(np.sqrt(np.mean((est - truth_rr) ** 2))),
        "coverage": float(np.mean((lo <= truth_rr) & (truth_rr <= hi))),
        "length": float(np.mean(hi - lo)),
    }
    t_idx = getattr(draws, "t_idx", None)
    if t_idx is not None:
        out["roughness_observed"] = rr_curve_roughness(rr, t_idx)
    curve = getattr(draws, "rr_curve", None)
    out["roughness"] = roughness(curve.mean(axis=0)) if curve is not None else math.nan
    return out


@dataclass
class BenchmarkConfig:
    scenarios: list = field(default_factory=lambda: list(SCENARIOS))
    models: list = field(default_factory=lambda: list(MODELS))
    n: int = 1000
    replicates: int = 10
    seed: int = 0
    rho: float = 0.25
    cut: float = 0.0
    n_burn: int = 500
    n_draws: int = 500
    threads: int = 1
    propensity_trees: int = 50
    propensity_burn: int = 250
    propensity_draws: int = 250
    standardized_curve: bool = False  # record the all-units RR curve for the roughness metric
    model: dict = field(default_factory=dict)  # extra ModelConfig overrides

    def validate(self) -> "BenchmarkConfig":
        for s in self.scenarios:
            if s not in SCENARIOS:
                raise ConfigError(f"unknown scenario {s!r}")
        for m in self.models:
            if m not in MODELS:
                raise ConfigError(f"unknown model {m!r}")
        if self.replicates < 1 or self.n < 2 or self.threads < 1:
            raise ConfigError("need replicates >= 1, n >= 2, threads >= 1")
        self.base_config()
        propensity_config(self.propensity_trees, self.propensity_burn, self.propensity_draws)
        return self

    def base_config(self) -> ModelConfig:
        return ModelConfig(n_burn=self.n_burn, n_draws=self.n_draws, **self.model).validate()

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown benchmark keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsRow:
    scenario: str
    model: str
    rmse: float
    rmse_sd: float
    coverage: float
    interval_length: float
    roughness: float
    roughness_observed: float
    replicates: int
    failures: int


def _run_replicate(task):
    """All requested models on one simulated dataset; streams keyed by position, not order."""
    cfg, si, rep = task
    bc = BenchmarkConfig(**cfg)
    root = RngStream(bc.seed)
    scen = SCENARIOS[si]
    spec = ScenarioSpec(scen, bc.rho, bc.n, bc.replicates, bc.seed, bc.cut)
    d, truth = gen_dataset(spec, root.child(si, rep, 0))
    out = {}
    try:
        pcfg = propensity_config(bc.propensity_trees, bc.propensity_burn, bc.propensity_draws)
        pi = fit_propensity(d, pcfg, root.child(si, rep, 1)).pi_hat
    except Exception as e:  # recorded, not fatal to the table
        return scen, rep, {m: {"error": f"propensity: {e}"} for m in bc.models}
    d = d.with_propensity(pi)
    base = bc.base_config()
    for m in bc.models:
        mi = MODELS.index(m)
        t0 = time.perf_counter()
        try:
            draws = run_chain(d, model_config(m, base), root.child(si, rep, 2 + mi),
                              rr_curve=bc.standardized_curve)
            out[m] = replicate_metrics(draws, truth.rr)
        except Exception as e:
            out[m] = {"error": str(e)}
        out[m]["seconds"] = time.perf_counter() - t0
    return scen, rep, out


def run_benchmark(config: BenchmarkConfig, progress=None) -> tuple[list, list]:
    """Returns (MetricsRow table, per-replicate records), both in a fixed order."""
    config.validate()
    cfg = config.to_dict()
    tasks = [(cfg, SCENARIOS.index(s), r) for s in config.scenarios for r in range(config.replicates)]
    if config.threads > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as ex:
            results = list(ex.map(_run_replicate, tasks))
    else:
        results = []
        for task in tasks:
            results.append(_run_replicate(task))
            if progress:
                progress(results[-1])
    records = []
    for scen, rep, out in results:
        for m in config.models:
            records.append({"scenario": scen, "replicate": rep, "model": m, **out[m]})
    table = []
    for s in config.scenarios:
        for m in config.models:
            rows = [r for r in records if r["scenario"] == s and r["model"] == m]
            ok = [r for r in rows if "error" not in r]
            rm = np.array([r["rmse"] for r in ok])
            table.append(MetricsRow(
                scenario=s, model=m,
                rmse=float(rm.mean()) if ok else math.nan,
                rmse_sd=float(rm.std(ddof=1)) if len(ok) > 1 else math.nan,
                coverage=float(np.mean([r["coverage"] for r in ok])) if ok else math.nan,
                interval_length=float(np.mean([r["length"] for r in ok])) if ok else math.nan,
                roughness=float(np.mean([r.get("roughness", math.nan) for r in ok])) if ok else math.nan,
                roughness_observed=float(np.mean([r.get("roughness_observed", math.nan) for r in ok]))
                if ok else math.nan,
                replicates=len(ok), failures=len(rows) - len(ok),
            ))
    return table, records
