"""Model and sampler configuration."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml
from scipy.stats import norm

SPREAD_DIVISOR = 3.3


def default_s_mu(lo: float = 0.860, hi: float = 0.999) -> float:
    return float((norm.ppf(hi) - norm.ppf(lo)) / SPREAD_DIVISOR)


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    # prognostic forest
    n_mu: int = 200
    eta_mu: float = 0.95
    beta_mu: float = 2.0
    kappa_mu: float = 1.0
    s_mu: float = default_s_mu()
    nu_mu: float = 1.0
    mu_scale_mode: str = "half-cauchy"  # or "fixed" (Delta_mu = 1)
    # treatment forest
    n_tau: int = 50
    eta_tau: float = 0.25
    beta_tau: float = 3.0
    kappa_tau: float = 1.0
    s_tau: float = default_s_mu() / 2
    nu_tau: float = 1.0
    tau_scale_mode: str = "half-normal"  # or "half-cauchy"
    # explicit length-scales override kappa; math.inf gives constant leaves
    lengthscale_mu: float | None = None
    lengthscale_tau: float | None = None
    # response
    response_mode: str = "probit"  # or "continuous"
    offset_mode: str = "per-target"  # or "pooled": one offset from the overall rate
    sigma_nu: float = 3.0
    sigma_q: float = 0.90
    # model structure
    use_tau_forest: bool = True
    update_xi: bool = True
    include_propensity: bool = True
    target_as_covariate: bool = False
    z_in_mu: bool = False
    # chain
    n_burn: int = 1000
    n_draws: int = 1000
    thin: int = 1
    seed: int = 0
    jitter: float = 1e-8
    max_nodes: int = 255

    def validate(self) -> "ModelConfig":
        if self.n_mu < 1 or (self.use_tau_forest and self.n_tau < 1):
            raise ConfigError("tree counts must be >= 1")
        for name in ("eta_mu", "eta_tau"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigError(f"{name} must be in (0, 1), got {v}")
        for name in ("beta_mu", "beta_tau"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("kappa_mu", "kappa_tau", "s_mu", "s_tau", "nu_mu", "nu_tau", "sigma_nu"):
            v = getattr(self, name)
            if not v > 0:
                raise ConfigError(f"{name} must be > 0, got {v}")
        for name in ("lengthscale_mu", "lengthscale_tau"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.mu_scale_mode not in ("half-cauchy", "fixed"):
            raise ConfigError(f"unknown mu_scale_mode {self.mu_scale_mode!r}")
        if self.tau_scale_mode not in ("half-normal", "half-cauchy"):
            raise ConfigError(f"unknown tau_scale_mode {self.tau_scale_mode!r}")
        if self.response_mode not in ("probit", "continuous"):
            raise ConfigError(f"unknown response_mode {self.response_mode!r}")
        if self.offset_mode not in ("per-target", "pooled"):
            raise ConfigError(f"unknown offset_mode {self.offset_mode!r}")
        if not 0 < self.sigma_q < 1:
            raise ConfigError("sigma_q must be in (0, 1)")
        if self.n_burn < 0 or self.n_draws < 1 or self.thin < 1:
            raise ConfigError("need n_burn >= 0, n_draws >= 1, thin >= 1")
        if self.max_nodes < 3:
            raise ConfigError("max_nodes must be >= 3")
        return self

    def updated(self, **kw) -> "ModelConfig":
        return replace(self, **kw).validate()

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, float) and math.isinf(v):
                out[k] = "inf"
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        clean = {k: (math.inf if v in ("inf", "Infinity") else v) for k, v in d.items()}
        return cls(**clean).validate()


def load_yaml(path) -> dict:
    with Path(path).open() as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a key-value mapping")
    return data


def dump_yaml(data: dict, path) -> None:
    with Path(path).open("w") as fh:
        yaml.safe_dump(data, fh, sort_keys=True, default_flow_style=False)
