"""Compiled kernels for curve-leaf tree ensembles.

Residual convention: for tree ``j`` the latent-scale residual is
``e_i = target_i - a_i * (fit_i - g_j(i))`` and the working precision of
observation ``i`` is ``a_i**2 * prec``. Per leaf and grid point we keep

    D_t = sum a_i**2 * prec        B_t = sum a_i * e_i * prec

which equal ``W'LW`` and ``W'L r`` for the working response ``r = e / a``
without ever dividing by ``a``.

Node status codes: 0 unused, 1 leaf, 2 internal.
"""

import math

import numpy as np
from numba import njit

GROW = 0
PRUNE = 1
UNUSED = 0
LEAF = 1
INTERNAL = 2


@njit(cache=True)
def p_split(eta, beta, depth):
    return eta * (1.0 + depth) ** (-beta)


@njit(cache=True)
def chol_inplace(A):
    n = A.shape[0]
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= A[j, k] * A[j, k]
        if s <= 0.0:
            return False
        d = math.sqrt(s)
        A[j, j] = d
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= A[i, k] * A[j, k]
            A[i, j] = s / d
        for i in range(j):
            A[i, j] = 0.0
    return True


@njit(cache=True)
def solve_lower(L, b):
    n = b.shape[0]
    x = np.empty(n)
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * x[k]
        x[i] = s / L[i, i]
    return x


@njit(cache=True)
def solve_upper_t(L, b):
    # solves L^T x = b
    n = b.shape[0]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, n):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return x


@njit(cache=True)
def _inner_factor(D, Sig):
    # chol(I + S Sig S), S = diag(sqrt(D))
    T = D.shape[0]
    sd = np.sqrt(D)
    M = np.empty((T, T))
    for i in range(T):
        for k in range(T):
            M[i, k] = sd[i] * Sig[i, k] * sd[k]
        M[i, i] += 1.0
    ok = chol_inplace(M)
    return M, sd, ok


@njit(cache=True)
def log_marginal_core(D, B, Sig):
    """0.5 b'(K + D)^{-1} b - 0.5 log|I + D^1/2 Sig D^1/2|.

    Equals the leaf log marginal likelihood up to terms that do not depend
    on the tree structure.
    """
    T = D.shape[0]
    M, sd, ok = _inner_factor(D, Sig)
    if not ok:
        return -np.inf
    Sb = Sig @ B
    q = 0.0
    for t in range(T):
        q += B[t] * Sb[t]
    v = solve_lower(M, sd * Sb)
    for t in range(T):
        q -= v[t] * v[t]
    logdet = 0.0
    for t in range(T):
        logdet += 2.0 * math.log(M[t, t])
    return 0.5 * q - 0.5 * logdet


@njit(cache=True)
def posterior_moments(D, B, Sig):
    """Mean and covariance of the leaf-curve full conditional."""
    T = D.shape[0]
    M, sd, ok = _inner_factor(D, Sig)
    Sb = Sig @ B
    w = solve_upper_t(M, solve_lower(M, sd * Sb))
    mean = Sb - Sig @ (sd * w)
    # Sig - Sig S M^{-1} S Sig
    A = np.empty((T, T))
    for k in range(T):
        col = sd * Sig[:, k]
        A[:, k] = solve_lower(M, col)
    cov = Sig - A.T @ A
    return mean, cov


@njit(cache=True)
def draw_curve(D, B, Sig, Lp, z1, z2):
    """Exact draw from the leaf-curve full conditional (prior-conditioning form).

    ``z1`` and ``z2`` are independent standard normal T-vectors.
    """
    T = D.shape[0]
    m = Lp @ z1
    M, sd, ok = _inner_factor(D, Sig)
    u = np.zeros(T)
    for t in range(T):
        if sd[t] > 0.0:
            u[t] = B[t] / sd[t] - sd[t] * m[t] - z2[t]
    w = solve_upper_t(M, solve_lower(M, u))
    return m + Sig @ (sd * w)


# ---------------------------------------------------------------- tree helpers


@njit(cache=True)
def node_obs(leaf_of_j, node):
    n = leaf_of_j.shape[0]
    c = 0
    for i in range(n):
        if leaf_of_j[i] == node:
            c += 1
    out = np.empty(c, dtype=np.int64)
    c = 0
    for i in range(n):
        if leaf_of_j[i] == node:
            out[c] = i
            c += 1
    return out


@njit(cache=True)
def var_has_spread(Xt, v, idx):
    if idx.shape[0] < 2:
        return False
    x0 = Xt[v, idx[0]]
    for k in range(1, idx.shape[0]):
        if Xt[v, idx[k]] != x0:
            return True
    return False


@njit(cache=True)
def valid_vars(Xt, idx):
    p = Xt.shape[0]
    flags = np.zeros(p, dtype=np.bool_)
    c = 0
    for v in range(p):
        if var_has_spread(Xt, v, idx):
            flags[v] = True
            c += 1
    out = np.empty(c, dtype=np.int64)
    c = 0
    for v in range(p):
        if flags[v]:
            out[c] = v
            c += 1
    return out


@njit(cache=True)
def is_splittable(Xt, idx):
    for v in range(Xt.shape[0]):
        if var_has_spread(Xt, v, idx):
            return True
    return False


@njit(cache=True)
def goes_left(x, is_cat_v, cut, mask):
    if is_cat_v:
        return ((mask >> np.int64(x)) & 1) == 1
    return x <= cut


@njit(cache=True)
def leaf_stats(idx, resid, a, prec, t_idx, T):
    D = np.zeros(T)
    B = np.zeros(T)
    for k in range(idx.shape[0]):
        i = idx[k]
        t = t_idx[i]
        D[t] += a[i] * a[i] * prec
        B[t] += a[i] * resid[i] * prec
    return D, B


@njit(cache=True)
def tree_counts(j, status, left, right):
    """(n_leaves, n_growable, n_prunable) with growable = splittable leaf."""
    M = status.shape[1]
    nl = 0
    npr = 0
    for k in range(M):
        if status[j, k] == LEAF:
            nl += 1
        elif status[j, k] == INTERNAL:
            if status[j, left[j, k]] == LEAF and status[j, right[j, k]] == LEAF:
                npr += 1
    return nl, npr


@njit(cache=True)
def count_growable(j, status, splittable):
    c = 0
    for k in range(status.shape[1]):
        if status[j, k] == LEAF and splittable[j, k]:
            c += 1
    return c


@njit(cache=True)
def split_prior_logratio(eta, beta, d, splL, splR):
    ps = p_split(eta, beta, d)
    psc = p_split(eta, beta, d + 1)
    out = math.log(ps) - math.log(1.0 - ps)
    if splL:
        out += math.log(1.0 - psc)
    if splR:
        out += math.log(1.0 - psc)
    return out


@njit(cache=True)
def parent_prunable_now(j, node, status, left, right, parent):
    # whether parent(node) is prunable in the current tree
    par = parent[j, node]
    if par < 0:
        return False
    sib = right[j, par] if left[j, par] == node else left[j, par]
    return status[j, sib] == LEAF and status[j, node] == LEAF


@njit(cache=True)
def grow_eval(j, leaf, v, cut, mask, Xt, is_cat, t_idx, resid, a, prec, Sig,
              eta, beta, use_lik, status, left, right, parent, depth, splittable, leaf_of):
    """Log acceptance ratio of splitting ``leaf`` with the given rule."""
    T = Sig.shape[0]
    idx = node_obs(leaf_of[j], leaf)
    nL = 0
    for k in range(idx.shape[0]):
        if goes_left(Xt[v, idx[k]], is_cat[v], cut, mask):
            nL += 1
    idxL = np.empty(nL, dtype=np.int64)
    idxR = np.empty(idx.shape[0] - nL, dtype=np.int64)
    cl = 0
    cr = 0
    for k in range(idx.shape[0]):
        i = idx[k]
        if goes_left(Xt[v, i], is_cat[v], cut, mask):
            idxL[cl] = i
            cl += 1
        else:
            idxR[cr] = i
            cr += 1
    splL = is_splittable(Xt, idxL)
    splR = is_splittable(Xt, idxR)

    _, n_prun = tree_counts(j, status, left, right)
    n_grow = count_growable(j, status, splittable)
    grow_new = n_grow - 1 + (1 if splL else 0) + (1 if splR else 0)
    prun_new = n_prun + 1 - (1 if parent_prunable_now(j, leaf, status, left, right, parent) else 0)
    pg = 0.5 if (n_grow > 0 and n_prun > 0) else 1.0
    pp_new = 0.5 if grow_new > 0 else 1.0
    lr = math.log(pp_new) - math.log(pg) + math.log(n_grow) - math.log(prun_new)
    lr += split_prior_logratio(eta, beta, depth[j, leaf], splL, splR)
    if use_lik:
        DL, BL = leaf_stats(idxL, resid, a, prec, t_idx, T)
        DR, BR = leaf_stats(idxR, resid, a, prec, t_idx, T)
        lr += log_marginal_core(DL, BL, Sig) + log_marginal_core(DR, BR, Sig)
        lr -= log_marginal_core(DL + DR, BL + BR, Sig)
    return lr, idxL, idxR, splL, splR


@njit(cache=True)
def prune_eval(j, node, Xt, t_idx, resid, a, prec, Sig, eta, beta, use_lik,
               status, left, right, parent, depth, splittable, leaf_of):
    T = Sig.shape[0]
    L = left[j, node]
    R = right[j, node]
    splL = splittable[j, L]
    splR = splittable[j, R]
    _, n_prun = tree_counts(j, status, left, right)
    n_grow = count_growable(j, status, splittable)
    grow_new = n_grow - (1 if splL else 0) - (1 if splR else 0) + 1
    prun_new = n_prun - 1
    par = parent[j, node]
    if par >= 0:
        sib = right[j, par] if left[j, par] == node else left[j, par]
        if status[j, sib] == LEAF:
            prun_new += 1
    pp = 0.5 if n_grow > 0 else 1.0
    pg_new = 0.5 if prun_new > 0 else 1.0
    lr = math.log(pg_new) - math.log(pp) + math.log(n_prun) - math.log(grow_new)
    lr -= split_prior_logratio(eta, beta, depth[j, node], splL, splR)
    if use_lik:
        DL, BL = leaf_stats(node_obs(leaf_of[j], L), resid, a, prec, t_idx, T)
        DR, BR = leaf_stats(node_obs(leaf_of[j], R), resid, a, prec, t_idx, T)
        lr += log_marginal_core(DL + DR, BL + BR, Sig)
        lr -= log_marginal_core(DL, BL, Sig) + log_marginal_core(DR, BR, Sig)
    return lr


@njit(cache=True)
def free_slots(j, status):
    out = np.full(2, -1, dtype=np.int64)
    c = 0
    for k in range(1, status.shape[1]):
        if status[j, k] == UNUSED:
            out[c] = k
            c += 1
            if c == 2:
                break
    return out


@njit(cache=True)
def grow_apply(j, leaf, v, cut, mask, idxL, idxR, splL, splR, slots,
               var, cuts, masks, status, left, right, parent, depth, splittable, leaf_of):
    L = slots[0]
    R = slots[1]
    var[j, leaf] = v
    cuts[j, leaf] = cut
    masks[j, leaf] = mask
    status[j, leaf] = INTERNAL
    left[j, leaf] = L
    right[j, leaf] = R
    for c, s in ((L, splL), (R, splR)):
        status[j, c] = LEAF
        var[j, c] = -1
        parent[j, c] = leaf
        left[j, c] = -1
        right[j, c] = -1
        depth[j, c] = depth[j, leaf] + 1
        splittable[j, c] = s
    for k in range(idxL.shape[0]):
        leaf_of[j, idxL[k]] = L
    for k in range(idxR.shape[0]):
        leaf_of[j, idxR[k]] = R


@njit(cache=True)
def prune_apply(j, node, var, status, left, right, leaf_of):
    L = left[j, node]
    R = right[j, node]
    n = leaf_of.shape[1]
    for i in range(n):
        if leaf_of[j, i] == L or leaf_of[j, i] == R:
            leaf_of[j, i] = node
    status[j, L] = UNUSED
    status[j, R] = UNUSED
    status[j, node] = LEAF
    var[j, node] = -1
    left[j, node] = -1
    right[j, node] = -1


@njit(cache=True)
def random_rule(Xt, is_cat, idx):
    """Uniform variable among those with spread, then uniform cut / subset."""
    vv = valid_vars(Xt, idx)
    v = vv[np.random.randint(0, vv.shape[0])]
    vals = np.empty(idx.shape[0])
    for k in range(idx.shape[0]):
        vals[k] = Xt[v, idx[k]]
    u = np.unique(vals)
    cut = 0.0
    mask = np.int64(0)
    if is_cat[v]:
        k = u.shape[0]
        while True:
            mask = np.int64(0)
            nin = 0
            for q in range(k):
                if np.random.random() < 0.5:
                    mask |= np.int64(1) << np.int64(u[q])
                    nin += 1
            if 0 < nin < k:
                break
    else:
        cut = u[np.random.randint(0, u.shape[0] - 1)]
    return v, cut, mask


@njit(cache=True)
def pick_growable(j, status, splittable):
    n = count_growable(j, status, splittable)
    r = np.random.randint(0, n)
    c = 0
    for k in range(status.shape[1]):
        if status[j, k] == LEAF and splittable[j, k]:
            if c == r:
                return k
            c += 1
    return -1


@njit(cache=True)
def pick_prunable(j, status, left, right, n_prun):
    r = np.random.randint(0, n_prun)
    c = 0
    for k in range(status.shape[1]):
        if status[j, k] == INTERNAL:
            if status[j, left[j, k]] == LEAF and status[j, right[j, k]] == LEAF:
                if c == r:
                    return k
                c += 1
    return -1


@njit(cache=True)
def tree_values(j, leaf_of, curves, t_idx, out):
    for i in range(out.shape[0]):
        out[i] = curves[j, leaf_of[j, i], t_idx[i]]


@njit(cache=True)
def mh_step(j, move, Xt, is_cat, t_idx, resid, a, prec, Sig, eta, beta, use_lik,
            var, cuts, masks, status, left, right, parent, depth, splittable, leaf_of):
    """One grow or prune proposal on tree ``j``.

    ``move`` < 0 picks the move at random. Returns (move, proposed, accepted, log_ratio).
    """
    n_grow = count_growable(j, status, splittable)
    _, n_prun = tree_counts(j, status, left, right)
    if move < 0:
        if n_grow > 0 and n_prun > 0:
            move = GROW if np.random.random() < 0.5 else PRUNE
        elif n_grow > 0:
            move = GROW
        elif n_prun > 0:
            move = PRUNE
        else:
            return GROW, False, False, -np.inf
    if move == GROW:
        if n_grow == 0:
            return move, False, False, -np.inf
        leaf = pick_growable(j, status, splittable)
        idx = node_obs(leaf_of[j], leaf)
        v, cut, mask = random_rule(Xt, is_cat, idx)
        lr, idxL, idxR, splL, splR = grow_eval(
            j, leaf, v, cut, mask, Xt, is_cat, t_idx, resid, a, prec, Sig, eta, beta,
            use_lik, status, left, right, parent, depth, splittable, leaf_of)
        slots = free_slots(j, status)
        if slots[1] < 0:
            return move, True, False, lr
        if math.log(np.random.random()) < lr:
            grow_apply(j, leaf, v, cut, mask, idxL, idxR, splL, splR, slots,
                       var, cuts, masks, status, left, right, parent, depth, splittable, leaf_of)
            return move, True, True, lr
        return move, True, False, lr
    if n_prun == 0:
        return move, False, False, -np.inf
    node = pick_prunable(j, status, left, right, n_prun)
    lr = prune_eval(j, node, Xt, t_idx, resid, a, prec, Sig, eta, beta, use_lik,
                    status, left, right, parent, depth, splittable, leaf_of)
    if math.log(np.random.random()) < lr:
        prune_apply(j, node, var, status, left, right, leaf_of)
        return move, True, True, lr
    return move, True, False, lr


@njit(cache=True)
def redraw_leaves(j, t_idx, resid, a, prec, Sig, Lp, use_lik, status, leaf_of, curves):
    M = status.shape[1]
    T = Sig.shape[0]
    D = np.zeros((M, T))
    B = np.zeros((M, T))
    if use_lik:
        for i in range(leaf_of.shape[1]):
            k = leaf_of[j, i]
            t = t_idx[i]
            D[k, t] += a[i] * a[i] * prec
            B[k, t] += a[i] * resid[i] * prec
    for k in range(M):
        if status[j, k] == LEAF:
            z1 = np.random.standard_normal(T)
            z2 = np.random.standard_normal(T)
            curves[j, k, :] = draw_curve(D[k], B[k], Sig, Lp, z1, z2)


@njit(cache=True)
def seed(s):
    np.random.seed(s)


@njit(cache=True)
def sweep(seed_value, Xt, is_cat, t_idx, target, a, prec, Sig, Lp, eta, beta, use_lik,
          var, cuts, masks, status, left, right, parent, depth, splittable, leaf_of,
          curves, fit, counts):
    """Backfit every tree once: MH on structure, then redraw its leaf curves.

    ``counts`` accumulates [grow proposed, grow accepted, prune proposed, prune accepted].
    """
    np.random.seed(seed_value)
    m = status.shape[0]
    n = fit.shape[0]
    gold = np.empty(n)
    resid = np.empty(n)
    for j in range(m):
        tree_values(j, leaf_of, curves, t_idx, gold)
        for i in range(n):
            resid[i] = target[i] - a[i] * (fit[i] - gold[i])
        move, proposed, accepted, _ = mh_step(
            j, -1, Xt, is_cat, t_idx, resid, a, prec, Sig, eta, beta, use_lik,
            var, cuts, masks, status, left, right, parent, depth, splittable, leaf_of)
        if proposed:
            counts[2 * move] += 1
            if accepted:
                counts[2 * move + 1] += 1
        redraw_leaves(j, t_idx, resid, a, prec, Sig, Lp, use_lik, status, leaf_of, curves)
        for i in range(n):
            fit[i] += curves[j, leaf_of[j, i], t_idx[i]] - gold[i]


@njit(cache=True)
def predict(Xt, is_cat, t_idx, var, cuts, masks, status, left, right, curves):
    m = status.shape[0]
    n = t_idx.shape[0]
    out = np.zeros(n)
    for j in range(m):
        for i in range(n):
            k = 0
            while status[j, k] == INTERNAL:
                v = var[j, k]
                if goes_left(Xt[v, i], is_cat[v], cuts[j, k], masks[j, k]):
                    k = left[j, k]
                else:
                    k = right[j, k]
            out[i] += curves[j, k, t_idx[i]]
    return out
