"""Dataset representation, delimited-file ingestion and holdout splitting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np


class DataError(ValueError):
    """Raised when an input file or array fails validation."""


@dataclass(frozen=True)
class TargetGrid:
    """Sorted unique values of the target covariate."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise DataError("target grid must be a non-empty vector")
        if v.size > 1 and not np.all(np.diff(v) > 0):
            raise DataError("target grid must be strictly increasing")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size

    @property
    def range(self) -> float:
        return float(self.values[-1] - self.values[0])

    @classmethod
    def from_values(cls, t: Sequence[float]) -> "TargetGrid":
        return cls(np.unique(np.asarray(t, dtype=float)))

    def index_of(self, t: Sequence[float]) -> np.ndarray:
        """Map target values to grid indices by exact equality."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.values, t)
        idx_c = np.clip(idx, 0, len(self) - 1)
        bad = self.values[idx_c] != t
        if np.any(bad):
            raise DataError(f"target value {t[bad][0]!r} is not on the grid")
        return idx_c.astype(np.int64)


def bin_targets(t: Sequence[float], grid: Sequence[float]) -> np.ndarray:
    """Snap continuous target values to the nearest point of a declared grid."""
    g = np.asarray(grid, dtype=float)
    t = np.asarray(t, dtype=float)
    pos = np.clip(np.searchsorted(g, t), 1, g.size - 1) if g.size > 1 else np.zeros(t.size, int)
    if g.size == 1:
        return np.full(t.shape, g[0])
    lo, hi = g[pos - 1], g[pos]
    return np.where(np.abs(t - lo) <= np.abs(hi - t), lo, hi)


@dataclass(frozen=True)
class Covariate:
    name: str
    kind: str = "continuous"  # or "categorical"
    levels: tuple = ()

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"


@dataclass(frozen=True)
class Dataset:
    """Binary outcomes, treatment, target-grid indices and covariates.

    Categorical covariates are stored in ``X`` as integer level codes
    (as floats) indexing ``covariates[j].levels``.
    """

    y: np.ndarray
    z: np.ndarray
    t_idx: np.ndarray
    X: np.ndarray
    grid: TargetGrid
    covariates: tuple = ()
    pi_hat: np.ndarray | None = None
    outcome_kind: str = "binary"  # or "continuous"

    def __post_init__(self):
        y = np.asarray(self.y)
        z = np.asarray(self.z)
        t_idx = np.asarray(self.t_idx, dtype=np.int64)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        n = y.shape[0]
        if n == 0:
            raise DataError("empty dataset")
        for name, v in (("treatment", z), ("target", t_idx), ("covariate", X)):
            if v.shape[0] != n:
                raise DataError(f"{name} length {v.shape[0]} != outcome length {n}")
        if self.outcome_kind == "binary":
            if not np.all(np.isin(y, (0, 1))):
                raise DataError("non-binary outcome")
        elif self.outcome_kind == "continuous":
            if not np.all(np.isfinite(np.asarray(y, float))):
                raise DataError("non-finite outcome")
        else:
            raise DataError(f"unknown outcome kind {self.outcome_kind!r}")
        if not np.all(np.isin(z, (0, 1))):
            raise DataError("non-binary treatment")
        if t_idx.min() < 0 or t_idx.max() >= len(self.grid):
            raise DataError("target index outside grid")
        if not np.all(np.isfinite(X)):
            raise DataError("missing or non-finite covariate values")
        covs = tuple(self.covariates) or tuple(Covariate(f"x{j}") for j in range(X.shape[1]))
        if len(covs) != X.shape[1]:
            raise DataError("covariate metadata does not match X columns")
        pi = self.pi_hat
        if pi is not None:
            pi = np.asarray(pi, dtype=float)
            if pi.shape != (n,) or not np.all((pi > 0) & (pi < 1)):
                raise DataError("propensity scores must lie strictly inside (0, 1)")
        object.__setattr__(self, "y", y.astype(np.int8 if self.outcome_kind == "binary" else float))
        object.__setattr__(self, "z", z.astype(np.int8))
        object.__setattr__(self, "t_idx", t_idx)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "covariates", covs)
        object.__setattr__(self, "pi_hat", pi)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def t(self) -> np.ndarray:
        return self.grid.values[self.t_idx]

    @property
    def is_categorical(self) -> np.ndarray:
        return np.array([c.is_categorical for c in self.covariates], dtype=bool)

    def with_propensity(self, pi_hat: np.ndarray) -> "Dataset":
        return replace(self, pi_hat=np.asarray(pi_hat, dtype=float))

    def subset(self, rows: np.ndarray) -> "Dataset":
        rows = np.asarray(rows)
        return replace(
            self,
            y=self.y[rows],
            z=self.z[rows],
            t_idx=self.t_idx[rows],
            X=self.X[rows],
            pi_hat=None if self.pi_hat is None else self.pi_hat[rows],
        )


@dataclass
class Schema:
    """Column roles for a delimited dataset file."""

    outcome: str = "y"
    treatment: str = "z"
    target: str = "t"
    covariates: list = field(default_factory=list)
    categorical: list = field(default_factory=list)
    propensity: str | None = None
    grid: list | None = None
    delimiter: str = ","
    outcome_kind: str = "binary"

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**d)


def _parse_float(s: str, col: str, row: int) -> float:
    try:
        v = float(s)
    except ValueError:
        raise DataError(f"unparseable numeric value {s!r} in column {col!r}, row {row}") from None
    if not math.isfinite(v):
        raise DataError(f"non-finite value in column {col!r}, row {row}")
    return v


def load_dataset(path, schema: Schema | None = None) -> Dataset:
    """Read a delimited text file with a header row into a validated Dataset."""
    schema = schema or Schema()
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"empty file: {path}") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"empty file: {path}")

    covs = list(schema.covariates)
    if not covs:
        reserved = {schema.outcome, schema.treatment, schema.target, schema.propensity}
        covs = [h for h in header if h not in reserved]
    needed = [schema.outcome, schema.treatment, schema.target, *covs]
    if schema.propensity:
        needed.append(schema.propensity)
    for col in needed:
        if col not in header:
            raise DataError(f"missing column {col!r}")
    pos = {h: i for i, h in enumerate(header)}

    def column(name):
        return [r[pos[name]].strip() if pos[name] < len(r) else "" for r in rows]

    def numeric(name):
        return np.array([_parse_float(s, name, k + 2) for k, s in enumerate(column(name))])

    y = numeric(schema.outcome)
    if schema.outcome_kind == "binary" and not np.all(np.isin(y, (0, 1))):
        raise DataError("non-binary outcome")
    z = numeric(schema.treatment)
    if not np.all(np.isin(z, (0, 1))):
        raise DataError("non-binary treatment")
    t = numeric(schema.target)
    grid = TargetGrid(np.asarray(schema.grid, float)) if schema.grid else TargetGrid.from_values(t)
    t_idx = grid.index_of(t)

    cat = set(schema.categorical)
    cols, meta = [], []
    for name in covs:
        raw = column(name)
        if name in cat:
            levels: dict[str, int] = {}
            codes = []
            for k, s in enumerate(raw):
                if s == "":
                    raise DataError(f"missing value in column {name!r}, row {k + 2}")
                codes.append(levels.setdefault(s, len(levels)))
            cols.append(np.asarray(codes, dtype=float))
            meta.append(Covariate(name, "categorical", tuple(levels)))
        else:
            cols.append(np.array([_parse_float(s, name, k + 2) for k, s in enumerate(raw)]))
            meta.append(Covariate(name))
    X = np.column_stack(cols) if cols else np.zeros((len(rows), 0))
    pi = numeric(schema.propensity) if schema.propensity else None
    return Dataset(y=y, z=z, t_idx=t_idx, X=X, grid=grid, covariates=tuple(meta), pi_hat=pi,
                   outcome_kind=schema.outcome_kind)


def save_dataset(d: Dataset, path, schema: Schema | None = None) -> Schema:
    """Write a Dataset so that ``load_dataset`` reproduces it exactly."""
    schema = schema or Schema()
    names = [c.name for c in d.covariates]
    header = [schema.outcome, schema.treatment, schema.target, *names]
    if d.pi_hat is not None:
        header.append(schema.propensity or "pi_hat")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=schema.delimiter, lineterminator="\n")
        w.writerow(header)
        t = d.t
        for i in range(d.n):
            yi = int(d.y[i]) if d.outcome_kind == "binary" else repr(float(d.y[i]))
            row = [yi, int(d.z[i]), repr(float(t[i]))]
            for j, c in enumerate(d.covariates):
                v = d.X[i, j]
                row.append(c.levels[int(v)] if c.is_categorical else repr(float(v)))
            if d.pi_hat is not None:
                row.append(repr(float(d.pi_hat[i])))
            w.writerow(row)
    return Schema(
        outcome=schema.outcome,
        treatment=schema.treatment,
        target=schema.target,
        covariates=names,
        categorical=[c.name for c in d.covariates if c.is_categorical],
        propensity=(schema.propensity or "pi_hat") if d.pi_hat is not None else None,
        grid=[float(v) for v in d.grid.values],
        delimiter=schema.delimiter,
        outcome_kind=d.outcome_kind,
    )


def holdout_rows(n: int, m: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Sorted (train, holdout) row indices with ``m`` rows held out."""
    if not 0 < m < n:
        raise DataError(f"holdout size {m} must be in (0, {n})")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[m:]), np.sort(perm[:m])


def split_holdout(d: Dataset, m: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Randomly hold out ``m`` rows; returns (train, holdout)."""
    train, hold = holdout_rows(d.n, m, seed)
    return d.subset(train), d.subset(hold)
