"""Plain-text persistence for draws, tables and run manifests.

Draws are stored one quantity per file, one row per retained draw, values
written with 17 significant digits so a reload is exact.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np
import yaml

from .sampler import PosteriorDraws

UNIT_MATRICES = ("mu", "tau", "f0", "f1")
TRACES = ("xi", "b0", "b1", "delta_mu", "delta_tau", "sigma2")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return "%.17g" % v
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_table(path, columns: dict) -> Path:
    """Write equal-length columns as a comma-separated file with a header."""
    path = Path(path)
    names = list(columns)
    cols = [np.asarray(columns[k]).tolist() for k in names]
    n = len(cols[0]) if cols else 0
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for i in range(n):
            w.writerow([_fmt(c[i]) for c in cols])
    return path


def read_table(path) -> dict:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    names, body = rows[0], rows[1:]
    out = {}
    for j, k in enumerate(names):
        vals = [r[j] for r in body]
        try:
            out[k] = np.array([float(v) for v in vals])
        except ValueError:
            out[k] = np.array(vals)
    return out


def _write_matrix(path, a):
    np.savetxt(path, np.atleast_2d(a), fmt="%.17g", delimiter=",")


def _read_matrix(path, ndmin=2):
    return np.loadtxt(path, delimiter=",", ndmin=ndmin)


def save_draws(draws: PosteriorDraws, outdir) -> list:
    """Write every draw quantity; returns the file paths written."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for k in UNIT_MATRICES:
        p = out / f"{k}.csv"
        _write_matrix(p, getattr(draws, k))
        files.append(p)
    files.append(write_table(out / "traces.csv", {k: getattr(draws, k) for k in TRACES}))
    files.append(write_table(out / "units.csv", {"t_index": draws.t_idx, "z": draws.z.astype(int)}))
    files.append(write_table(out / "alpha.csv", {"alpha": draws.alpha}))
    meta = {"response_mode": draws.response_mode, "seed": int(draws.seed), "accept": draws.accept,
            "n_draws": draws.n_draws, "n_units": draws.n}
    p = out / "draws.yaml"
    with p.open("w") as fh:
        yaml.safe_dump(meta, fh, sort_keys=True)
    files.append(p)
    return files


def load_draws(outdir) -> PosteriorDraws:
    out = Path(outdir)
    with (out / "draws.yaml").open() as fh:
        meta = yaml.safe_load(fh)
    mats = {k: _read_matrix(out / f"{k}.csv") for k in UNIT_MATRICES}
    tr = read_table(out / "traces.csv")
    units = read_table(out / "units.csv")
    alpha = read_table(out / "alpha.csv")["alpha"]
    return PosteriorDraws(
        **mats, alpha=alpha, t_idx=units["t_index"].astype(np.int64), z=units["z"].astype(float),
        **{k: np.atleast_1d(tr[k]) for k in TRACES}, accept=meta.get("accept", {}),
        seed=meta.get("seed", 0), response_mode=meta.get("response_mode", "probit"),
    )


def concat_draws(chains: list) -> PosteriorDraws:
    """Stack chains in the given order."""
    first = chains[0]
    kw = {k: np.concatenate([getattr(c, k) for c in chains]) for k in UNIT_MATRICES + TRACES}
    accept = {f"chain{i}": c.accept for i, c in enumerate(chains)} if len(chains) > 1 else first.accept
    return PosteriorDraws(**kw, alpha=first.alpha, t_idx=first.t_idx, z=first.z, accept=accept,
                          seed=first.seed, wall_time=sum(c.wall_time for c in chains),
                          response_mode=first.response_mode)


def write_manifest(outdir, manifest: dict) -> Path:
    """Written last: its presence marks a completed run."""
    p = Path(outdir) / "manifest.yaml"
    with p.open("w") as fh:
        yaml.safe_dump(_plain(manifest), fh, sort_keys=True, default_flow_style=False)
    return p


def read_manifest(outdir) -> dict:
    p = Path(outdir) / "manifest.yaml"
    if not p.exists():
        raise FileNotFoundError(f"no manifest in {outdir} (incomplete or missing run)")
    with p.open() as fh:
        return yaml.safe_load(fh)


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, Path):
        return str(x)
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x
