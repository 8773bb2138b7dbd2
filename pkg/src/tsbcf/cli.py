"""Command-line entry point: fit, summarize, simulate, calibrate, propensity.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
Seeds: every random stream derives from ``--seed`` through numpy
SeedSequence spawn keys (stream id, then a per-task key), so outputs do not
depend on ``--threads``.
"""

from __future__ import annotations

import argparse
import logging
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np
from scipy.stats import norm

from . import __version__
from .calibration import s_mu_from_elicitation, s_tau_calibrate, structural_heterogeneity_grid, \
    structural_heterogeneity_ratio
from .config import ConfigError, ModelConfig, dump_yaml, load_yaml
from .data import DataError, Dataset, Schema, holdout_rows, load_dataset, split_holdout
from .estimands import fit_the_fit, grouped_rr_by_target, nnt_by_target, nnt_difference_distribution, \
    per_unit_rr, rr_by_target, rr_draws, subgroup_posterior, targeted_selection_pseudo_r2, \
    treated_failure_excess
from .io import concat_draws, load_draws, read_manifest, read_table, save_draws, write_manifest, write_table
from .propensity import fit_propensity, propensity_config
from .rng import RngStream
from .sampler import SamplerError, run_chain
from .simbench import BenchmarkConfig, run_benchmark

log = logging.getLogger("tsbcf")

# stream ids under the run seed
STREAM_PROPENSITY = 1
STREAM_CHAIN = 2
STREAM_HETGRID = 3

HET_ALPHAS = tuple(float(norm.ppf(p)) for p in (0.80, 0.90, 0.93, 0.95))
HET_TAUS = (-0.5, -0.313, -0.1)
HET_SDS = (0.1, 0.3, 0.6, 1.0)


class UsageError(Exception):
    pass


def _manifest(command, args, outputs, t0, **extra) -> dict:
    return {
        "command": command,
        "arguments": {k: v for k, v in vars(args).items() if k != "func"},
        "outputs": sorted(str(p) for p in outputs),
        "wall_time_seconds": round(time.perf_counter() - t0, 3),
        "version": __version__,
        "python": platform.python_version(),
        **extra,
    }


def _load_run_config(path) -> dict:
    if path is None:
        return {}
    if not Path(path).exists():
        raise UsageError(f"config file not found: {path}")
    cfg = load_yaml(path)
    unknown = set(cfg) - {"schema", "model", "propensity", "calibration"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _schema(cfg: dict, args) -> Schema:
    schema = Schema.from_dict(cfg.get("schema", {}))
    if getattr(args, "propensity_column", None):
        schema.propensity = args.propensity_column
    return schema


def _load_data(path, schema) -> Dataset:
    if not Path(path).exists():
        raise UsageError(f"dataset not found: {path}")
    return load_dataset(path, schema)


# ---------------------------------------------------------------- fit


def _chain_task(task):
    d, cfg_dict, seed, c = task
    cfg = ModelConfig.from_dict(cfg_dict)
    return run_chain(d, cfg, RngStream(seed, STREAM_CHAIN).child(c))


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_run_config(args.config)
    schema = _schema(cfg, args)
    d = _load_data(args.data, schema)
    model = dict(cfg.get("model", {}))
    for k in ("n_burn", "n_draws", "thin"):
        if getattr(args, k) is not None:
            model[k] = getattr(args, k)
    model["seed"] = args.seed
    mcfg = ModelConfig.from_dict(model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    root = RngStream(args.seed)

    rows = np.arange(d.n)
    calib = cfg.get("calibration", {})
    holdout = args.calibrate_holdout if args.calibrate_holdout is not None else calib.get("holdout", 0)
    calibration = None
    if holdout:
        rows, hold_rows = holdout_rows(d.n, int(holdout), seed=args.seed)
        train, hold = d.subset(rows), d.subset(hold_rows)
        calibration = s_tau_calibrate(hold, lo=calib.get("lo", 0.860), hi=calib.get("hi", 0.999))
        mcfg = mcfg.updated(s_mu=calibration.s_mu, s_tau=calibration.s_tau)
        d = train
        dump_yaml({"model": {"s_mu": calibration.s_mu, "s_tau": calibration.s_tau},
                   "details": calibration.to_dict()}, out / "calibration.yaml")
        outputs.append(out / "calibration.yaml")

    if mcfg.include_propensity and d.pi_hat is None:
        pc = cfg.get("propensity", {})
        pcfg = propensity_config(pc.get("trees", 200), pc.get("burn", 500), pc.get("draws", 500))
        d = d.with_propensity(fit_propensity(d, pcfg, root.child(STREAM_PROPENSITY)).pi_hat)
        outputs.append(write_table(out / "pi_hat.csv", {"row": rows, "pi_hat": d.pi_hat}))

    tasks = [(d, mcfg.to_dict(), args.seed, c) for c in range(args.chains)]
    if args.threads > 1 and args.chains > 1:
        with ProcessPoolExecutor(max_workers=args.threads) as ex:
            chains = list(ex.map(_chain_task, tasks))
    else:
        chains = [_chain_task(t) for t in tasks]
    draws = concat_draws(chains)
    outputs += save_draws(draws, out)
    outputs.append(write_table(out / "rows.csv", {"row": rows}))
    st = chains[0].state
    if st is not None:
        (out / "mu_forest.txt").write_text(st.mu_forest.to_text())
        outputs.append(out / "mu_forest.txt")
        if st.tau_forest is not None:
            (out / "tau_forest.txt").write_text(st.tau_forest.to_text())
            outputs.append(out / "tau_forest.txt")
    dump_yaml(mcfg.to_dict(), out / "model_config.yaml")
    outputs.append(out / "model_config.yaml")
    write_manifest(out, _manifest(
        "fit", args, outputs, t0, seed=args.seed, config=mcfg.to_dict(),
        inputs={"data": str(args.data), "config": str(args.config) if args.config else None},
        acceptance=draws.accept, chains=args.chains,
        calibration=calibration.to_dict() if calibration else None,
    ))
    print(f"wrote {draws.n_draws} draws for {draws.n} units to {out}")
    return 0


# ---------------------------------------------------------------- summarize


def _group_labels(d: Dataset, column: str, bands) -> np.ndarray:
    names = [c.name for c in d.covariates]
    if column not in names:
        raise UsageError(f"unknown covariate {column!r}")
    j = names.index(column)
    x = d.X[:, j]
    if d.covariates[j].is_categorical:
        return np.array([d.covariates[j].levels[int(v)] for v in x])
    if not bands:
        return x.astype(str)
    edges = np.asarray(bands, float)
    k = np.searchsorted(edges, x, side="right")
    lab = ["<" + f"{edges[0]:g}"] + [f"[{a:g},{b:g})" for a, b in zip(edges[:-1], edges[1:])] + [f">={edges[-1]:g}"]
    return np.array([lab[i] for i in k])


def cmd_summarize(args) -> int:
    t0 = time.perf_counter()
    fit_dir = Path(args.fit_dir)
    try:
        man = read_manifest(fit_dir)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None
    cfg_path = args.config if args.config is not None else (man.get("inputs") or {}).get("config")
    cfg = _load_run_config(cfg_path)
    d = _load_data(args.data, _schema(cfg, args))
    rows = read_table(fit_dir / "rows.csv")["row"].astype(int)
    d = d.subset(rows)
    draws = load_draws(fit_dir)
    if draws.n != d.n:
        raise UsageError(f"fit has {draws.n} units but the dataset selection has {d.n}")
    sel = np.ones(d.n, bool)
    t = d.t
    if args.t_min is not None:
        sel &= t >= args.t_min
    if args.t_max is not None:
        sel &= t <= args.t_max
    if not sel.any():
        raise UsageError("empty selection: no units inside the target range")
    out = Path(args.out or fit_dir / "summary")
    out.mkdir(parents=True, exist_ok=True)
    rr = rr_draws(draws)
    outputs = [
        write_table(out / "rr_by_target.csv", rr_by_target(rr, d.t_idx, d.grid)),
        write_table(out / "nnt_by_target.csv", nnt_by_target(rr, d.t_idx, d.grid)),
        write_table(out / "per_unit_rr.csv", {**per_unit_rr(rr), "t": t, "z": d.z}),
    ]
    excess = treated_failure_excess(draws, d.y, d.z) if d.z.any() else np.empty(0)
    outputs.append(write_table(out / "treated_failure_excess.csv",
                               {"draw": np.arange(excess.size), "excess_per_1000": excess}))

    idx = np.flatnonzero(sel)
    rr_sel = type(rr)(rr.rr[:, idx], rr.p0[:, idx], rr.p1[:, idx])
    names = [c.name for c in d.covariates]
    min_leaf = min(args.min_leaf, max(idx.size // 2, 1))
    tree = fit_the_fit(rr_sel.rr.mean(axis=0), d.X[idx], args.max_depth, min_leaf, d.is_categorical,
                       names, rr_sel.p0.mean(axis=0), rr_sel.p1.mean(axis=0))
    (out / "cart.txt").write_text(tree.render())
    outputs.append(out / "cart.txt")
    nodes = tree.nodes
    outputs.append(write_table(out / "cart_nodes.csv", {
        "node": [nd.id for nd in nodes], "depth": [nd.depth for nd in nodes],
        "leaf": [int(nd.is_leaf) for nd in nodes], "n": [nd.members.size for nd in nodes],
        "share": [nd.share for nd in nodes], "mean_rr": [nd.mean for nd in nodes],
        "nnt": [nd.nnt for nd in nodes],
    }))
    leaves = tree.leaves()
    long = {"node": [], "draw": [], "rr": []}
    for nd in leaves:
        v = subgroup_posterior(rr_sel, nd.members)
        long["node"] += [nd.id] * v.size
        long["draw"] += list(range(v.size))
        long["rr"] += v.tolist()
    outputs.append(write_table(out / "subgroup_draws.csv", long))
    if len(leaves) >= 2:
        diff = nnt_difference_distribution(rr_sel, leaves[0].members, leaves[-1].members)
        outputs.append(write_table(out / "nnt_difference.csv",
                                   {"draw": np.arange(diff.values.size), "nnt_difference": diff.values}))
    if args.group_by:
        groups = _group_labels(d, args.group_by, args.bands)
        outputs.append(write_table(out / "grouped_rr_by_target.csv", grouped_rr_by_target(rr, d.t_idx, groups)))
    if args.overlay:
        merged = {"mode": [], "t": [], "mean": [], "lo": [], "hi": []}
        for item in args.overlay:
            label, _, path = item.partition("=")
            if not path:
                raise UsageError(f"overlay entries must be LABEL=DIR, got {item!r}")
            o = rr_by_target(rr_draws(load_draws(path)), d.t_idx, d.grid)
            merged["mode"] += [label] * o["t"].size
            for k in ("t", "mean", "lo", "hi"):
                merged[k] += o[k].tolist()
        outputs.append(write_table(out / "kappa_overlay.csv", merged))
    summary = {"structural_heterogeneity_ratio": structural_heterogeneity_ratio(draws),
               "n_units": int(d.n), "n_selected": int(sel.sum())}
    if d.pi_hat is not None or (fit_dir / "pi_hat.csv").exists():
        pi = d.pi_hat if d.pi_hat is not None else read_table(fit_dir / "pi_hat.csv")["pi_hat"]
        try:
            summary["pseudo_r2"] = targeted_selection_pseudo_r2(d.y, pi)
        except ValueError as e:
            summary["pseudo_r2_error"] = str(e)
    dump_yaml(summary, out / "summary.yaml")
    outputs.append(out / "summary.yaml")
    write_manifest(out, _manifest("summarize", args, outputs, t0, fit_dir=str(fit_dir)))
    for k, v in summary.items():
        print(f"{k}: {v}")
    return 0


# ---------------------------------------------------------------- simulate


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    if args.config and not Path(args.config).exists():
        raise UsageError(f"config file not found: {args.config}")
    raw = load_yaml(args.config) if args.config else {}
    for k in ("n", "replicates", "n_burn", "n_draws"):
        if getattr(args, k) is not None:
            raw[k] = getattr(args, k)
    if args.scenarios:
        raw["scenarios"] = args.scenarios.split(",")
    if args.models:
        raw["models"] = args.models.split(",")
    raw["seed"] = args.seed
    raw["threads"] = args.threads
    bc = BenchmarkConfig.from_dict(raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table, records = run_benchmark(bc)
    cols = {k: [getattr(r, k) for r in table] for k in asdict(table[0])}
    outputs = [write_table(out / "metrics.csv", cols)]
    rec_cols = {"scenario": [], "replicate": [], "model": [], "rmse": [], "coverage": [], "length": [],
                "roughness": [], "roughness_observed": [], "error": []}
    for r in records:
        for k in rec_cols:
            rec_cols[k].append(r.get(k, "" if k == "error" else float("nan")))
    outputs.append(write_table(out / "replicates.csv", rec_cols))
    cfg_dict = bc.to_dict()
    cfg_dict.pop("threads")
    dump_yaml(cfg_dict, out / "benchmark_config.yaml")
    outputs.append(out / "benchmark_config.yaml")
    write_manifest(out, _manifest("simulate", args, outputs, t0, seed=args.seed, config=bc.to_dict()))
    for r in table:
        print(f"{r.scenario} {r.model:10s} rmse={r.rmse:.3f} sd={r.rmse_sd:.3f} "
              f"coverage={r.coverage:.3f} length={r.interval_length:.3f} roughness={r.roughness_observed:.4f}")
    return 0


# ---------------------------------------------------------------- calibrate / propensity


def cmd_calibrate(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_run_config(args.config)
    d = _load_data(args.data, _schema(cfg, args))
    s_mu = s_mu_from_elicitation(args.lo, args.hi, args.divisor)
    hold = d
    if args.holdout and args.holdout < d.n:
        _, hold = split_holdout(d, args.holdout, seed=args.seed)
    cal = s_tau_calibrate(hold, s_mu=s_mu, lo=args.lo, hi=args.hi, divisor=args.divisor)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    dump_yaml({"model": {"s_mu": cal.s_mu, "s_tau": cal.s_tau}, "details": cal.to_dict()},
              out / "calibration.yaml")
    outputs.append(out / "calibration.yaml")
    if args.het_grid:
        g = structural_heterogeneity_grid(HET_ALPHAS, HET_TAUS, HET_SDS, args.het_n,
                                          RngStream(args.seed, STREAM_HETGRID).generator)
        outputs.append(write_table(out / "het_grid.csv", g))
    write_manifest(out, _manifest("calibrate", args, outputs, t0, seed=args.seed))
    print(f"s_mu: {cal.s_mu:.4f}")
    print(f"s_tau: {cal.s_tau:.4f}{' (fallback)' if cal.fallback else ''}")
    return 0


def cmd_propensity(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_run_config(args.config)
    d = _load_data(args.data, _schema(cfg, args))
    pcfg = propensity_config(args.trees, args.n_burn, args.n_draws)
    fit = fit_propensity(d, pcfg, RngStream(args.seed, STREAM_PROPENSITY).child())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [write_table(out / "pi_hat.csv", {"row": np.arange(d.n), "pi_hat": fit.pi_hat})]
    write_manifest(out, _manifest("propensity", args, outputs, t0, seed=args.seed))
    print(f"pi_hat range [{fit.pi_hat.min():.4f}, {fit.pi_hat.max():.4f}] over {d.n} units")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsbcf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        if data:
            sp.add_argument("--data", required=True, help="delimited dataset with a header row")
        sp.add_argument("--config", help="YAML run configuration (schema/model/propensity/calibration)")
        sp.add_argument("--seed", type=int, default=0, help="root seed for all random streams")
        sp.add_argument("--propensity-column", help="use this column as the propensity score")

    f = sub.add_parser("fit", help="fit the model and write posterior draws")
    common(f)
    f.add_argument("--out", required=True)
    f.add_argument("--n-burn", type=int)
    f.add_argument("--n-draws", type=int)
    f.add_argument("--thin", type=int)
    f.add_argument("--chains", type=int, default=1)
    f.add_argument("--threads", type=int, default=1)
    f.add_argument("--calibrate-holdout", type=int, help="hold out this many rows to calibrate s_tau")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("summarize", help="write relative-risk, NNT and subgroup plot data")
    s.add_argument("fit_dir")
    common(s)
    s.add_argument("--out")
    s.add_argument("--t-min", type=float)
    s.add_argument("--t-max", type=float)
    s.add_argument("--max-depth", type=int, default=3)
    s.add_argument("--min-leaf", type=int, default=20)
    s.add_argument("--group-by", help="covariate for grouped RR-by-target output")
    s.add_argument("--bands", type=float, nargs="*", help="band edges for a continuous --group-by")
    s.add_argument("--overlay", nargs="*", help="LABEL=FIT_DIR entries merged into kappa_overlay.csv")
    s.set_defaults(func=cmd_summarize)

    m = sub.add_parser("simulate", help="run the simulation benchmark")
    m.add_argument("--config", help="YAML benchmark configuration")
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--threads", type=int, default=1)
    m.add_argument("--scenarios", help="comma-separated subset of A,B,C,D,E")
    m.add_argument("--models", help="comma-separated subset of tsBCF1,tsBCF2,BCF-mode,BART-mode")
    m.add_argument("--n", type=int)
    m.add_argument("--replicates", type=int)
    m.add_argument("--n-burn", type=int)
    m.add_argument("--n-draws", type=int)
    m.set_defaults(func=cmd_simulate)

    c = sub.add_parser("calibrate", help="prior scale selection")
    common(c)
    c.add_argument("--out", required=True)
    c.add_argument("--lo", type=float, default=0.860)
    c.add_argument("--hi", type=float, default=0.999)
    c.add_argument("--divisor", type=float, default=3.3)
    c.add_argument("--holdout", type=int, default=500)
    c.add_argument("--het-grid", action="store_true", help="also write structural-heterogeneity plot data")
    c.add_argument("--het-n", type=int, default=1000)
    c.set_defaults(func=cmd_calibrate)

    q = sub.add_parser("propensity", help="estimate propensity scores only")
    common(q)
    q.add_argument("--out", required=True)
    q.add_argument("--trees", type=int, default=200)
    q.add_argument("--n-burn", type=int, default=500)
    q.add_argument("--n-draws", type=int, default=500)
    q.set_defaults(func=cmd_propensity)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SamplerError, np.linalg.LinAlgError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2
    except (UsageError, DataError, ConfigError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except RuntimeError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
