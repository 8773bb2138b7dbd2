"""Tree ensembles with curve-valued leaves.

Each tree routes every observation to one leaf; a leaf holds a curve over
the target grid, so tree ``j`` contributes ``curve[leaf_j(i), t_i]`` to
observation ``i``. Structure moves are grow/prune Metropolis-Hastings steps
with the leaf curves integrated out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _engine as eng
from .kernel import FactoredKernel

MAX_CATEGORIES = 62


def split_probability(depth, eta: float, beta: float):
    """Prior probability that a node at ``depth`` is internal."""
    depth = np.asarray(depth)
    if np.any(depth < 0):
        raise ValueError("depth must be >= 0")
    return eta * (1.0 + depth) ** (-beta)


@dataclass
class LeafSuffStats:
    """Per-grid-point sufficient statistics of one leaf.

    ``w`` is the sum of precisions, ``wr`` the precision-weighted residual sum,
    ``wrr`` the weighted square sum. Unit weights give the homoskedastic
    statistics, to be scaled by 1/sigma^2.
    """

    n: np.ndarray
    w: np.ndarray
    wr: np.ndarray
    wrr: np.ndarray
    log_w: float = 0.0

    @classmethod
    def from_residuals(cls, r, t_idx, T: int, omega=None) -> "LeafSuffStats":
        r = np.asarray(r, float)
        t_idx = np.asarray(t_idx, int)
        om = np.ones_like(r) if omega is None else np.asarray(omega, float)
        if np.any(om <= 0):
            raise ValueError("precisions must be positive")
        return cls(
            n=np.bincount(t_idx, minlength=T).astype(float),
            w=np.bincount(t_idx, weights=om, minlength=T).astype(float),
            wr=np.bincount(t_idx, weights=om * r, minlength=T).astype(float),
            wrr=np.bincount(t_idx, weights=om * r * r, minlength=T).astype(float),
            log_w=float(np.sum(np.log(om))),
        )

    @property
    def count(self) -> int:
        return int(round(self.n.sum()))


def _full_loglik(D, B, SS, log_det_prec, n_l, kernel: FactoredKernel) -> float:
    if D.shape[0] != kernel.T:
        raise ValueError("statistics and kernel grid sizes differ")
    core = eng.log_marginal_core(np.ascontiguousarray(D), np.ascontiguousarray(B), kernel.C)
    if not np.isfinite(core):
        raise np.linalg.LinAlgError("leaf posterior precision is not positive definite")
    return -0.5 * n_l * math.log(2 * math.pi) + 0.5 * log_det_prec - 0.5 * float(np.sum(SS)) + core


def marginal_loglik_homoskedastic(stats: LeafSuffStats, sigma2: float, kernel: FactoredKernel) -> float:
    """log of the integral of N(y | W m, sigma2 I) N(m | 0, C) dm for one leaf."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    n_l = stats.count
    return _full_loglik(
        stats.n / sigma2, stats.wr / sigma2, stats.wrr / sigma2, -n_l * math.log(sigma2), n_l, kernel
    )


def marginal_loglik_heteroskedastic(stats: LeafSuffStats, kernel: FactoredKernel) -> float:
    """As the homoskedastic version with per-observation precisions (weights)."""
    return _full_loglik(stats.w, stats.wr, stats.wrr, stats.log_w, stats.count, kernel)


def _posterior_inputs(stats, sigma2):
    if sigma2 is None:
        return stats.w, stats.wr
    return stats.n / sigma2, stats.wr / sigma2


def leaf_posterior(stats: LeafSuffStats, kernel: FactoredKernel, sigma2: float | None = None):
    """Mean and covariance of the leaf curve given its residuals.

    ``sigma2=None`` uses the weighted (heteroskedastic) statistics.
    """
    D, B = _posterior_inputs(stats, sigma2)
    return eng.posterior_moments(np.ascontiguousarray(D, float), np.ascontiguousarray(B, float), kernel.C)


def sample_leaf_curve(stats: LeafSuffStats, kernel: FactoredKernel, sigma2: float | None,
                      rng: np.random.Generator) -> np.ndarray:
    D, B = _posterior_inputs(stats, sigma2)
    T = kernel.T
    z1 = rng.standard_normal(T)
    z2 = rng.standard_normal(T)
    return eng.draw_curve(np.ascontiguousarray(D, float), np.ascontiguousarray(B, float),
                          kernel.C, kernel.chol_C, z1, z2)


def _seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**32 - 1))


class Forest:
    """Ordered collection of curve-leaf trees sharing one kernel and design."""

    def __init__(self, n_trees: int, X: np.ndarray, is_cat, t_idx, kernel: FactoredKernel,
                 eta: float, beta: float, max_nodes: int = 255):
        X = np.asarray(X, float)
        if X.ndim != 2:
            raise ValueError("X must be 2-D")
        self.Xt = np.ascontiguousarray(X.T)
        self.is_cat = np.asarray(is_cat, dtype=np.bool_)
        if self.is_cat.shape[0] != X.shape[1]:
            raise ValueError("is_cat length must match X columns")
        if np.any(self.is_cat) and X[:, self.is_cat].max(initial=0) > MAX_CATEGORIES:
            raise ValueError(f"categorical covariates support at most {MAX_CATEGORIES + 1} levels")
        self.t_idx = np.ascontiguousarray(t_idx, dtype=np.int64)
        self.kernel = kernel
        self.eta = float(eta)
        self.beta = float(beta)
        self.delta = 1.0
        m, M, n, T = int(n_trees), int(max_nodes), X.shape[0], kernel.T
        self.var = np.full((m, M), -1, dtype=np.int64)
        self.cuts = np.zeros((m, M))
        self.masks = np.zeros((m, M), dtype=np.int64)
        self.status = np.zeros((m, M), dtype=np.int8)
        self.left = np.full((m, M), -1, dtype=np.int64)
        self.right = np.full((m, M), -1, dtype=np.int64)
        self.parent = np.full((m, M), -1, dtype=np.int64)
        self.depth = np.zeros((m, M), dtype=np.int64)
        self.splittable = np.zeros((m, M), dtype=np.bool_)
        self.curves = np.zeros((m, M, T))
        self.leaf_of = np.zeros((m, n), dtype=np.int64)
        self.fit = np.zeros(n)
        self._root_splittable = bool(eng.is_splittable(self.Xt, np.arange(n, dtype=np.int64)))
        self.reset()

    # ------------------------------------------------------------ structure
    @property
    def n_trees(self) -> int:
        return self.status.shape[0]

    @property
    def n(self) -> int:
        return self.fit.shape[0]

    def reset(self):
        """Every tree becomes a root-only tree with a zero curve."""
        self.status[:] = eng.UNUSED
        self.status[:, 0] = eng.LEAF
        self.var[:] = -1
        self.left[:] = -1
        self.right[:] = -1
        self.parent[:] = -1
        self.depth[:] = 0
        self.splittable[:, 0] = self._root_splittable
        self.curves[:] = 0.0
        self.leaf_of[:] = 0
        self.fit[:] = 0.0

    @property
    def Sig(self) -> np.ndarray:
        return self.kernel.C / self.delta

    @property
    def Lp(self) -> np.ndarray:
        return self.kernel.chol_C / math.sqrt(self.delta)

    def leaves(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.status[j] == eng.LEAF)

    def n_leaves(self) -> int:
        return int(np.sum(self.status == eng.LEAF))

    def max_depth(self) -> np.ndarray:
        d = np.where(self.status == eng.LEAF, self.depth, -1)
        return d.max(axis=1)

    def leaf_curves(self) -> np.ndarray:
        return self.curves[self.status == eng.LEAF]

    # ------------------------------------------------------------ fits
    def tree_contribution(self, j: int) -> np.ndarray:
        out = np.empty(self.n)
        eng.tree_values(j, self.leaf_of, self.curves, self.t_idx, out)
        return out

    def recompute_fit(self) -> np.ndarray:
        total = np.zeros(self.n)
        for j in range(self.n_trees):
            total += self.tree_contribution(j)
        return total

    def refresh_fit(self):
        self.fit[:] = self.recompute_fit()

    def predict(self, X, t_idx) -> np.ndarray:
        Xt = np.ascontiguousarray(np.asarray(X, float).T)
        return eng.predict(Xt, self.is_cat, np.ascontiguousarray(t_idx, dtype=np.int64),
                           self.var, self.cuts, self.masks, self.status, self.left, self.right,
                           self.curves)

    # ------------------------------------------------------------ MCMC
    def _arrays(self):
        return (self.var, self.cuts, self.masks, self.status, self.left, self.right,
                self.parent, self.depth, self.splittable, self.leaf_of)

    def sweep(self, target, a, prec: float, rng: np.random.Generator, use_likelihood: bool = True):
        """Backfit all trees against ``target``; returns move counters."""
        counts = np.zeros(4, dtype=np.int64)
        eng.sweep(_seed(rng), self.Xt, self.is_cat, self.t_idx,
                  np.ascontiguousarray(target, float), np.ascontiguousarray(a, float),
                  float(prec), self.Sig, self.Lp, self.eta, self.beta, use_likelihood,
                  *self._arrays(), self.curves, self.fit, counts)
        return counts

    def _resid(self, j, target, a):
        g = self.tree_contribution(j)
        return np.ascontiguousarray(target - a * (self.fit - g), float)

    def _propose(self, move, j, target, a, prec, rng, use_likelihood):
        n = self.n
        target = np.zeros(n) if target is None else np.asarray(target, float)
        a = np.ones(n) if a is None else np.asarray(a, float)
        resid = self._resid(j, target, a)
        rng = np.random.default_rng() if rng is None else rng
        eng.seed(_seed(rng))
        g_old = self.tree_contribution(j)
        before = self.status[j].copy()
        _, proposed, accepted, lr = eng.mh_step(
            j, move, self.Xt, self.is_cat, self.t_idx, resid, np.ascontiguousarray(a),
            float(prec), self.Sig, self.eta, self.beta, use_likelihood, *self._arrays())
        if accepted:
            # new children start from the parent's curve; a pruned node keeps
            # its last curve as a leaf; both are redrawn by redraw_leaves
            for k in np.flatnonzero((self.status[j] == eng.LEAF) & (before == eng.UNUSED)):
                self.curves[j, k] = self.curves[j, self.parent[j, k]]
            self.fit += self.tree_contribution(j) - g_old
        return bool(accepted), float(lr)

    def propose_grow(self, j, target=None, a=None, prec=1.0, rng=None, use_likelihood=True):
        """One grow proposal on tree ``j``; returns (accepted, log acceptance ratio).

        Leaves with no valid split are never selected; a tree without any
        growable leaf counts as a rejected proposal.
        """
        return self._propose(eng.GROW, j, target, a, prec, rng, use_likelihood)

    def propose_prune(self, j, target=None, a=None, prec=1.0, rng=None, use_likelihood=True):
        return self._propose(eng.PRUNE, j, target, a, prec, rng, use_likelihood)

    def redraw_leaves(self, j, target, a, prec, rng, use_likelihood=True):
        g_old = self.tree_contribution(j)
        resid = self._resid(j, np.asarray(target, float), np.asarray(a, float))
        eng.seed(_seed(rng))
        eng.redraw_leaves(j, self.t_idx, resid, np.ascontiguousarray(a, float), float(prec),
                          self.Sig, self.Lp, use_likelihood, self.status, self.leaf_of, self.curves)
        self.fit += self.tree_contribution(j) - g_old

    def grow_log_ratio(self, j, leaf, var, cut=0.0, mask=0, target=None, a=None, prec=1.0,
                       use_likelihood=True) -> float:
        n = self.n
        target = np.zeros(n) if target is None else np.asarray(target, float)
        a = np.ones(n) if a is None else np.asarray(a, float)
        lr, *_ = eng.grow_eval(j, leaf, var, float(cut), np.int64(mask), self.Xt, self.is_cat,
                               self.t_idx, self._resid(j, target, a), np.ascontiguousarray(a),
                               float(prec), self.Sig, self.eta, self.beta, use_likelihood,
                               self.status, self.left, self.right, self.parent, self.depth,
                               self.splittable, self.leaf_of)
        return float(lr)

    def prune_log_ratio(self, j, node, target=None, a=None, prec=1.0, use_likelihood=True) -> float:
        n = self.n
        target = np.zeros(n) if target is None else np.asarray(target, float)
        a = np.ones(n) if a is None else np.asarray(a, float)
        return float(eng.prune_eval(j, node, self.Xt, self.t_idx, self._resid(j, target, a),
                                    np.ascontiguousarray(a), float(prec), self.Sig, self.eta,
                                    self.beta, use_likelihood, self.status, self.left, self.right,
                                    self.parent, self.depth, self.splittable, self.leaf_of))

    def split(self, j, leaf, var, cut=0.0, mask=0) -> tuple[int, int]:
        """Deterministically split ``leaf``; children inherit the parent's curve."""
        if self.status[j, leaf] != eng.LEAF:
            raise ValueError(f"node {leaf} of tree {j} is not a leaf")
        idx = eng.node_obs(self.leaf_of[j], leaf)
        left = np.array([eng.goes_left(self.Xt[var, i], self.is_cat[var], float(cut), np.int64(mask))
                         for i in idx], dtype=bool)
        idxL, idxR = idx[left], idx[~left]
        slots = eng.free_slots(j, self.status)
        if slots[1] < 0:
            raise RuntimeError("tree node capacity exhausted")
        eng.grow_apply(j, leaf, var, float(cut), np.int64(mask), idxL, idxR,
                       bool(eng.is_splittable(self.Xt, idxL)), bool(eng.is_splittable(self.Xt, idxR)),
                       slots, self.var, self.cuts, self.masks, self.status, self.left, self.right,
                       self.parent, self.depth, self.splittable, self.leaf_of)
        self.curves[j, slots[0]] = self.curves[j, leaf]
        self.curves[j, slots[1]] = self.curves[j, leaf]
        return int(slots[0]), int(slots[1])

    def delta_ssq(self) -> tuple[float, int]:
        """(sum over leaves of m' C1^{-1} m, number of leaves) at unit shrinkage."""
        curves = self.leaf_curves()
        return float(np.sum(self.kernel.quad_form(curves))), curves.shape[0]

    # ------------------------------------------------------------ prior
    def _random_rule(self, idx, rng):
        valid = [v for v in range(self.Xt.shape[0]) if np.ptp(self.Xt[v, idx]) > 0]
        v = valid[rng.integers(len(valid))]
        u = np.unique(self.Xt[v, idx])
        if self.is_cat[v]:
            while True:
                bits = rng.random(u.size) < 0.5
                if 0 < bits.sum() < u.size:
                    break
            mask = int(np.sum(np.left_shift(1, u[bits].astype(np.int64))))
            return v, 0.0, mask
        return v, float(u[rng.integers(u.size - 1)]), 0

    def draw_from_prior(self, rng: np.random.Generator, curves: bool = True):
        """Forward-simulate every tree from the split prior, then leaf curves from N(0, C)."""
        self.reset()
        for j in range(self.n_trees):
            stack = [0]
            while stack:
                node = stack.pop()
                if not self.splittable[j, node]:
                    continue
                if rng.random() >= split_probability(self.depth[j, node], self.eta, self.beta):
                    continue
                idx = eng.node_obs(self.leaf_of[j], node)
                v, cut, mask = self._random_rule(idx, rng)
                L, R = self.split(j, node, v, cut, mask)
                stack.extend((R, L))
        if curves:
            Lp = self.Lp
            for j in range(self.n_trees):
                for k in self.leaves(j):
                    self.curves[j, k] = Lp @ rng.standard_normal(self.kernel.T)
        self.refresh_fit()

    # ------------------------------------------------------------ text format
    def to_text(self) -> str:
        """Node list: ``tree node parent kind var rule curve...``.

        kind is ``c`` (continuous split, rule = threshold, left if x <= rule),
        ``k`` (categorical split, rule = bitmask of levels sent left) or
        ``leaf`` (rule ``-``, followed by the curve over the grid).
        """
        lines = [
            "# tsbcf forest v1",
            f"trees {self.n_trees} grid {self.kernel.T} delta {self.delta!r} "
            f"eta {self.eta!r} beta {self.beta!r}",
        ]
        for j in range(self.n_trees):
            for k in np.flatnonzero(self.status[j] != eng.UNUSED):
                par = int(self.parent[j, k])
                if self.status[j, k] == eng.LEAF:
                    vals = " ".join(repr(float(x)) for x in self.curves[j, k])
                    lines.append(f"{j} {k} {par} leaf -1 - {vals}")
                else:
                    v = int(self.var[j, k])
                    if self.is_cat[v]:
                        lines.append(f"{j} {k} {par} k {v} {int(self.masks[j, k])}")
                    else:
                        lines.append(f"{j} {k} {par} c {v} {float(self.cuts[j, k])!r}")
        return "\n".join(lines) + "\n"

    def load_text(self, text: str):
        """Restore structure and curves written by ``to_text`` (same design data)."""
        rows = [ln.split() for ln in text.splitlines() if ln and not ln.startswith("#")]
        head = rows[0]
        meta = dict(zip(head[0::2], head[1::2]))
        if int(meta["trees"]) != self.n_trees or int(meta["grid"]) != self.kernel.T:
            raise ValueError("forest text does not match this forest's shape")
        self.reset()
        self.status[:, 0] = eng.UNUSED
        self.delta = float(meta["delta"])
        nodes = {}
        for r in rows[1:]:
            j, k, par = int(r[0]), int(r[1]), int(r[2])
            nodes.setdefault(j, []).append((k, par, r[3:]))
        for j, items in nodes.items():
            for k, par, rest in items:
                self.status[j, k] = eng.LEAF if rest[0] == "leaf" else eng.INTERNAL
                self.parent[j, k] = par
                if rest[0] == "leaf":
                    self.curves[j, k] = np.array([float(x) for x in rest[3:]])
                else:
                    self.var[j, k] = int(rest[1])
                    if rest[0] == "k":
                        self.masks[j, k] = int(rest[2])
                    else:
                        self.cuts[j, k] = float(rest[2])
            for k, par, _ in sorted(items):
                if par >= 0:
                    if self.left[j, par] < 0:
                        self.left[j, par] = k
                    else:
                        self.right[j, par] = k
            # depth, routing and splittability follow from the structure
            order = [0]
            self.depth[j, 0] = 0
            self.leaf_of[j] = 0
            while order:
                k = order.pop()
                idx = eng.node_obs(self.leaf_of[j], k)
                self.splittable[j, k] = bool(eng.is_splittable(self.Xt, idx))
                if self.status[j, k] == eng.INTERNAL:
                    v = self.var[j, k]
                    for i in idx:
                        go = eng.goes_left(self.Xt[v, i], self.is_cat[v], self.cuts[j, k], self.masks[j, k])
                        self.leaf_of[j, i] = self.left[j, k] if go else self.right[j, k]
                    for c in (self.left[j, k], self.right[j, k]):
                        self.depth[j, c] = self.depth[j, k] + 1
                        order.append(c)
        self.refresh_fit()


def partial_residuals(working, forest: Forest, j: int) -> np.ndarray:
    """Working response minus the fit of every tree except ``j``."""
    return np.asarray(working, float) - (forest.fit - forest.tree_contribution(j))
