"""Causal summaries of posterior draws: relative risk, NNT, subgroups, diagnostics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import norm

NNT_INF = math.inf  # sentinel when the two probabilities are equal


@dataclass
class RRDraws:
    """(draws x units) matrices of p0 = Phi(f(z=0)), p1 = Phi(f(z=1)) and RR = p1 / p0."""

    rr: np.ndarray
    p0: np.ndarray
    p1: np.ndarray

    @property
    def n_draws(self) -> int:
        return self.rr.shape[0]

    @property
    def n(self) -> int:
        return self.rr.shape[1]


def rr_draws(draws) -> RRDraws:
    p0 = norm.cdf(draws.f0)
    p1 = norm.cdf(draws.f1)
    return RRDraws(rr=p1 / p0, p0=p0, p1=p1)


def interval(x, axis=0, level=0.95):
    a = (1 - level) / 2
    return np.quantile(x, a, axis=axis), np.quantile(x, 1 - a, axis=axis)


def summarize(x, axis=0) -> dict:
    lo, hi = interval(x, axis)
    return {"mean": np.mean(x, axis=axis), "lo": lo, "hi": hi}


def rr_by_target(rr: RRDraws, t_idx, grid=None) -> dict:
    """Per grid point: per-draw mean RR over its units, then mean and 95% interval.

    Grid points without units are omitted (with a warning).
    """
    t_idx = np.asarray(t_idx)
    T = int(t_idx.max()) + 1 if grid is None else len(grid)
    values = np.arange(T, dtype=float) if grid is None else np.asarray(getattr(grid, "values", grid))
    rows = {"t_index": [], "t": [], "n": [], "mean": [], "lo": [], "hi": []}
    empty = []
    for t in range(T):
        sel = t_idx == t
        if not sel.any():
            empty.append(t)
            continue
        per_draw = rr.rr[:, sel].mean(axis=1)
        s = summarize(per_draw)
        rows["t_index"].append(t)
        rows["t"].append(float(values[t]))
        rows["n"].append(int(sel.sum()))
        for k in ("mean", "lo", "hi"):
            rows[k].append(float(s[k]))
    if empty:
        warnings.warn(f"grid points without units omitted: {empty}", RuntimeWarning, stacklevel=2)
    return {k: np.asarray(v) for k, v in rows.items()}


def nnt(p0, p1):
    """1 / (p0 - p1); positive when treatment lowers the success probability.

    Equal probabilities give the ``NNT_INF`` sentinel.
    """
    p0 = np.asarray(p0, float)
    p1 = np.asarray(p1, float)
    diff = p0 - p1
    with np.errstate(divide="ignore"):
        out = np.where(diff == 0, NNT_INF, 1.0 / np.where(diff == 0, 1.0, diff))
    return out if out.ndim else float(out)


def nnt_by_target(rr: RRDraws, t_idx, grid=None) -> dict:
    """Per grid point NNT from per-draw mean p0, p1; median and 95% interval."""
    t_idx = np.asarray(t_idx)
    T = int(t_idx.max()) + 1 if grid is None else len(grid)
    values = np.arange(T, dtype=float) if grid is None else np.asarray(getattr(grid, "values", grid))
    rows = {"t_index": [], "t": [], "median": [], "lo": [], "hi": [], "n_undefined": []}
    for t in range(T):
        sel = t_idx == t
        if not sel.any():
            continue
        v = nnt(rr.p0[:, sel].mean(axis=1), rr.p1[:, sel].mean(axis=1))
        ok = np.isfinite(v)
        rows["t_index"].append(t)
        rows["t"].append(float(values[t]))
        rows["n_undefined"].append(int((~ok).sum()))
        if ok.any():
            lo, hi = interval(v[ok])
            rows["median"].append(float(np.median(v[ok])))
            rows["lo"].append(float(lo))
            rows["hi"].append(float(hi))
        else:
            rows["median"].append(NNT_INF)
            rows["lo"].append(NNT_INF)
            rows["hi"].append(NNT_INF)
    return {k: np.asarray(v) for k, v in rows.items()}


def per_unit_rr(rr: RRDraws) -> dict:
    s = summarize(rr.rr)
    return {"unit": np.arange(rr.n), **s}


def subgroup_posterior(rr: RRDraws, members) -> np.ndarray:
    """Per-draw mean RR over the member units (index array or boolean mask)."""
    idx = np.asarray(members)
    if idx.dtype == bool:
        idx = np.flatnonzero(idx)
    if idx.size == 0:
        raise ValueError("empty subgroup")
    return rr.rr[:, idx].mean(axis=1)


@dataclass
class NNTDifference:
    values: np.ndarray  # per draw, NaN where either group NNT is undefined
    n_excluded: int

    def summary(self) -> dict:
        v = self.values[np.isfinite(self.values)]
        if v.size == 0:
            return {"mean": math.nan, "lo": math.nan, "hi": math.nan, "n_excluded": self.n_excluded}
        lo, hi = interval(v)
        return {"mean": float(v.mean()), "lo": float(lo), "hi": float(hi), "n_excluded": self.n_excluded}


def nnt_difference_distribution(rr: RRDraws, group_a, group_b) -> NNTDifference:
    """Per draw NNT(group A mean p0, p1) - NNT(group B mean p0, p1)."""
    out = []
    for g in (group_a, group_b):
        idx = np.asarray(g)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        if idx.size == 0:
            raise ValueError("empty subgroup")
        out.append(nnt(rr.p0[:, idx].mean(axis=1), rr.p1[:, idx].mean(axis=1)))
    a, b = out
    bad = ~(np.isfinite(a) & np.isfinite(b))
    diff = np.where(bad, np.nan, np.where(bad, 0.0, a) - np.where(bad, 0.0, b))
    return NNTDifference(values=diff, n_excluded=int(bad.sum()))


def treated_failure_excess(draws, y, z) -> np.ndarray:
    """Per draw, per 1000 treated: observed failures minus expected failures under control."""
    y = np.asarray(y, float)
    tr = np.asarray(z) == 1
    if not tr.any():
        raise ValueError("no treated units")
    p0 = norm.cdf(draws.f0[:, tr])
    observed = np.sum(1 - y[tr])
    expected = np.sum(1 - p0, axis=1)
    return (observed - expected) * 1000.0 / tr.sum()


def grouped_rr_by_target(rr: RRDraws, t_idx, groups) -> dict:
    """Posterior mean and interval of the per-draw mean RR in each (group, t) cell."""
    t_idx = np.asarray(t_idx)
    groups = np.asarray(groups)
    rows = {"group": [], "t_index": [], "n": [], "mean": [], "lo": [], "hi": []}
    for g in list(dict.fromkeys(groups.tolist())):
        for t in np.unique(t_idx):
            sel = (groups == g) & (t_idx == t)
            if not sel.any():
                continue
            s = summarize(rr.rr[:, sel].mean(axis=1))
            rows["group"].append(g)
            rows["t_index"].append(int(t))
            rows["n"].append(int(sel.sum()))
            for k in ("mean", "lo", "hi"):
                rows[k].append(float(s[k]))
    return {k: np.asarray(v) for k, v in rows.items()}


# ----------------------------------------------------------------- fit-the-fit CART


@dataclass
class CartNode:
    id: int
    depth: int
    members: np.ndarray
    mean: float
    share: float
    sse: float
    p0: float = math.nan
    p1: float = math.nan
    nnt: float = math.nan
    var: int = -1
    threshold: float = math.nan
    levels: tuple = ()  # categorical: level codes sent left
    left: int = -1
    right: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.left < 0


@dataclass
class CartTree:
    nodes: list = field(default_factory=list)
    names: tuple = ()
    is_cat: np.ndarray | None = None

    def leaves(self) -> list:
        return [nd for nd in self.nodes if nd.is_leaf]

    def sse(self) -> float:
        return float(sum(nd.sse for nd in self.leaves()))

    def rule(self, nd: CartNode, left: bool) -> str:
        name = self.names[nd.var] if self.names else f"x{nd.var}"
        if nd.levels:
            lv = ",".join(str(int(v)) for v in nd.levels)
            return f"{name} in {{{lv}}}" if left else f"{name} not in {{{lv}}}"
        return f"{name} <= {nd.threshold:.6g}" if left else f"{name} > {nd.threshold:.6g}"

    def render(self) -> str:
        lines = []

        def walk(k, prefix):
            nd = self.nodes[k]
            info = f"mean RR {nd.mean:.4f}, {100 * nd.share:.1f}% of units"
            if math.isfinite(nd.nnt):
                info += f", NNT {nd.nnt:.1f}"
            lines.append(f"{prefix}[{nd.id}] {info}")
            if not nd.is_leaf:
                lines.append(f"{prefix}  if {self.rule(nd, True)}:")
                walk(nd.left, prefix + "    ")
                lines.append(f"{prefix}  else:")
                walk(nd.right, prefix + "    ")

        walk(0, "")
        return "\n".join(lines) + "\n"


def _sse(v):
    return float(np.sum((v - v.mean()) ** 2)) if v.size else 0.0


def best_split(y, X, is_cat, min_leaf: int):
    """Exhaustive search: returns (sse_after, var, threshold, left_levels) or None."""
    n = y.size
    best = None
    for v in range(X.shape[1]):
        x = X[:, v]
        if is_cat[v]:
            levels = np.unique(x)
            if levels.size < 2:
                continue
            means = np.array([y[x == lv].mean() for lv in levels])
            order = levels[np.argsort(means, kind="stable")]
            for k in range(1, order.size):
                left_lv = order[:k]
                m = np.isin(x, left_lv)
                nl = int(m.sum())
                if nl < min_leaf or n - nl < min_leaf:
                    continue
                s = _sse(y[m]) + _sse(y[~m])
                if best is None or s < best[0]:
                    best = (s, v, math.nan, tuple(np.sort(left_lv).tolist()))
        else:
            o = np.argsort(x, kind="stable")
            xs, ys = x[o], y[o]
            c1 = np.cumsum(ys)
            c2 = np.cumsum(ys * ys)
            tot1, tot2 = c1[-1], c2[-1]
            for k in range(min_leaf, n - min_leaf + 1):
                if k == n or xs[k - 1] == xs[k]:
                    continue
                nl, nr = k, n - k
                sl = c2[k - 1] - c1[k - 1] ** 2 / nl
                sr = (tot2 - c2[k - 1]) - (tot1 - c1[k - 1]) ** 2 / nr
                s = max(sl, 0.0) + max(sr, 0.0)
                if best is None or s < best[0]:
                    best = (s, v, float(xs[k - 1]), ())
    if best is None:
        return None
    # exact SSE of the chosen partition (prefix sums only rank candidates)
    s, v, thr, lv = best
    m = np.isin(X[:, v], lv) if lv else X[:, v] <= thr
    return _sse(y[m]) + _sse(y[~m]), v, thr, lv


def fit_the_fit(rr_mean, X, max_depth: int = 3, min_leaf: int = 20, is_cat=None, names=(),
                p0=None, p1=None) -> CartTree:
    """Greedy least-squares regression tree on per-unit posterior-mean RR.

    ``p0``/``p1`` (per-unit posterior-mean probabilities) give node NNTs
    from node-mean probabilities.
    """
    y = np.asarray(rr_mean, float)
    X = np.asarray(X, float)
    if X.ndim == 1:
        X = X[:, None]
    n = y.size
    if n < 2 * min_leaf:
        raise ValueError(f"need at least {2 * min_leaf} units for min_leaf={min_leaf}")
    is_cat = np.zeros(X.shape[1], bool) if is_cat is None else np.asarray(is_cat, bool)
    tree = CartTree(names=tuple(names), is_cat=is_cat)

    def make(members, depth):
        v = y[members]
        nd = CartNode(id=len(tree.nodes), depth=depth, members=members, mean=float(v.mean()),
                      share=members.size / n, sse=_sse(v))
        if p0 is not None and p1 is not None:
            nd.p0 = float(np.mean(np.asarray(p0)[members]))
            nd.p1 = float(np.mean(np.asarray(p1)[members]))
            nd.nnt = float(nnt(nd.p0, nd.p1))
        tree.nodes.append(nd)
        return nd

    def grow(nd):
        if nd.depth >= max_depth or np.ptp(y[nd.members]) == 0:
            return
        found = best_split(y[nd.members], X[nd.members], is_cat, min_leaf)
        if found is None:
            return
        s, var, thr, lv = found
        if not nd.sse - s > 1e-12 * nd.sse:
            return
        xm = X[nd.members, var]
        go = np.isin(xm, lv) if lv else xm <= thr
        nd.var, nd.threshold, nd.levels = var, thr, lv
        L = make(nd.members[go], nd.depth + 1)
        nd.left = L.id
        grow(L)
        R = make(nd.members[~go], nd.depth + 1)
        nd.right = R.id
        grow(R)

    grow(make(np.arange(n), 0))
    return tree


# ----------------------------------------------------------------- diagnostics


def _logistic_loglik(y, eta):
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def targeted_selection_pseudo_r2(y, pi_hat, tol: float = 1e-8, max_iter: int = 100) -> float:
    """McFadden pseudo-R^2 of a logistic regression of y on (1, pi_hat), fit by Newton-Raphson."""
    y = np.asarray(y, float)
    x = np.asarray(pi_hat, float)
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("y must be binary")
    if np.any((x <= 0) | (x >= 1)):
        raise ValueError("pi_hat must lie in (0, 1)")
    ybar = y.mean()
    if ybar in (0.0, 1.0):
        raise ValueError("outcome is constant; pseudo-R^2 undefined")
    ll_null = _logistic_loglik(y, np.full_like(y, math.log(ybar / (1 - ybar))))
    if np.ptp(x) == 0:
        return 0.0
    A = np.column_stack([np.ones_like(x), x])
    beta = np.array([math.log(ybar / (1 - ybar)), 0.0])
    ll = ll_null
    for it in range(max_iter):
        eta = A @ beta
        p = expit(eta)
        w = p * (1 - p)
        H = A.T @ (A * w[:, None])
        g = A.T @ (y - p)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.full(2, np.nan)
        if not np.all(np.isfinite(step)):
            raise ValueError(
                f"Newton-Raphson broke down at iteration {it} (coefficients {beta.tolist()}); "
                "the outcome is separated by pi_hat"
            )
        beta = beta + step
        ll_new = _logistic_loglik(y, A @ beta)
        if np.max(np.abs(step)) < tol:
            ll = ll_new
            break
        ll = ll_new
    else:
        raise ValueError(
            f"Newton-Raphson did not converge in {max_iter} iterations "
            f"(coefficients {beta.tolist()}, log-likelihood {ll:.3g}); the outcome may be separated by pi_hat"
        )
    return 1.0 - ll / ll_null
