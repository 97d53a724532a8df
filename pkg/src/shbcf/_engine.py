"""Numba kernels for the backfitting sampler.

Trees live in heap-indexed arrays of shape ``(m, cap)`` with ``cap = 2**(max_depth+1) - 1``:
node ``i`` has children ``2i+1`` / ``2i+2``. ``state`` is 0 (unused), 1 (leaf) or 2 (internal).
``leaf_of[j, i]`` caches the leaf of tree ``j`` holding training observation ``i``.

Covariates enter as bin codes ``xb`` of shape ``(p, n)``; a rule ``(v, c)`` sends
observation ``i`` left iff ``xb[v, i] <= c``.

Observation weights ``w`` multiply the forest in the likelihood
(``r_i ~ N(w_i g(x_i), sigma^2)``). Only observations with ``w_i != 0`` count
toward ``min_leaf``.
"""

import math

import numpy as np
from numba import njit

MOVE_NONE = -1
MOVE_GROW = 0
MOVE_PRUNE = 1
MOVE_CHANGE = 2

_NB = dict(cache=True, nogil=True, error_model="numpy")


@njit(**_NB)
def depth_table(cap):
    out = np.empty(cap, dtype=np.int32)
    for i in range(cap):
        d = 0
        k = i + 1
        while k > 1:
            k >>= 1
            d += 1
        out[i] = d
    return out


@njit(**_NB)
def log_split_prob(d, nu, beta):
    return math.log(nu) - d * math.log1p(beta)


@njit(**_NB)
def log_leaf_prior(growable, d, nu, beta):
    # log P(node terminal); zero when the node cannot split at all
    if growable:
        return math.log1p(-math.exp(log_split_prob(d, nu, beta)))
    return 0.0


@njit(**_NB)
def log_marginal(W, S, sigma2, tau2):
    # leaf value integrated out; terms shared by competing trees dropped
    prec = W / sigma2 + 1.0 / tau2
    return -0.5 * math.log(tau2 * prec) + 0.5 * (S / sigma2) ** 2 / prec


@njit(**_NB)
def members(leaf_row, node, out):
    c = 0
    for i in range(leaf_row.shape[0]):
        if leaf_row[i] == node:
            out[c] = i
            c += 1
    return c


@njit(**_NB)
def members2(leaf_row, a, b, out):
    c = 0
    for i in range(leaf_row.shape[0]):
        k = leaf_row[i]
        if k == a or k == b:
            out[c] = i
            c += 1
    return c


@njit(**_NB)
def valid_range(xb, v, idx, cnt, w, min_leaf, buf):
    """Valid cut indices for covariate ``v`` are ``lo .. hi-1``."""
    if min_leaf <= 1:
        lo = 1 << 30
        hi = -1
        neff = 0
        for k in range(cnt):
            i = idx[k]
            if w[i] != 0.0:
                b = xb[v, i]
                neff += 1
                if b < lo:
                    lo = b
                if b > hi:
                    hi = b
        if neff < 2:
            return 0, 0
        return lo, hi
    neff = 0
    for k in range(cnt):
        i = idx[k]
        if w[i] != 0.0:
            buf[neff] = xb[v, i]
            neff += 1
    if neff < 2 * min_leaf:
        return 0, 0
    srt = np.sort(buf[:neff])
    lo = srt[min_leaf - 1]
    hi = srt[neff - min_leaf]
    if hi <= lo:
        return 0, 0
    return lo, hi


@njit(**_NB)
def is_growable(xb, ncuts, idx, cnt, w, min_leaf, depth, max_depth, buf):
    if depth >= max_depth:
        return False
    for v in range(xb.shape[0]):
        if ncuts[v] == 0:
            continue
        lo, hi = valid_range(xb, v, idx, cnt, w, min_leaf, buf)
        if hi > lo:
            return True
    return False


@njit(**_NB)
def draw_from_cumulative(rng, cum):
    u = rng.random() * cum[cum.shape[0] - 1]
    lo = 0
    hi = cum.shape[0] - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cum[mid] > u:
            hi = mid
        else:
            lo = mid + 1
    return lo


@njit(**_NB)
def draw_rule(rng, xb, ncuts, s, cum_s, idx, cnt, w, min_leaf, buf, lo_buf, hi_buf):
    """Covariate drawn from ``s`` restricted to covariates with a valid cut, cut uniform.

    A few rejection tries first, then the exact restricted draw; both give the
    same distribution.
    """
    for _ in range(8):
        v = draw_from_cumulative(rng, cum_s)
        if ncuts[v] == 0:
            continue
        lo, hi = valid_range(xb, v, idx, cnt, w, min_leaf, buf)
        if hi > lo:
            return v, lo + rng.integers(0, hi - lo)
    p = xb.shape[0]
    tot = 0.0
    for v in range(p):
        lo_buf[v] = 0
        hi_buf[v] = 0
        if ncuts[v] == 0:
            continue
        lo, hi = valid_range(xb, v, idx, cnt, w, min_leaf, buf)
        if hi > lo:
            lo_buf[v] = lo
            hi_buf[v] = hi
            tot += s[v]
    if tot <= 0.0:
        return -1, -1
    u = rng.random() * tot
    acc = 0.0
    last = -1
    for v in range(p):
        if hi_buf[v] > lo_buf[v]:
            last = v
            acc += s[v]
            if u < acc:
                break
    v = last
    return v, lo_buf[v] + rng.integers(0, hi_buf[v] - lo_buf[v])


@njit(**_NB)
def split_stats(xb, v, c, idx, cnt, w, R, left_idx, right_idx):
    WL = 0.0
    SL = 0.0
    WR = 0.0
    SR = 0.0
    nl = 0
    nr = 0
    for k in range(cnt):
        i = idx[k]
        wi = w[i]
        if xb[v, i] <= c:
            WL += wi * wi
            SL += wi * R[i]
            left_idx[nl] = i
            nl += 1
        else:
            WR += wi * wi
            SR += wi * R[i]
            right_idx[nr] = i
            nr += 1
    return WL, SL, WR, SR, nl, nr


@njit(**_NB)
def count_moves(j, state, grow, nodes, nnodes):
    G = 0
    nog = 0
    for k in range(nnodes[j]):
        nd = nodes[j, k]
        if state[j, nd] == 1:
            if grow[j, nd]:
                G += 1
        elif state[j, 2 * nd + 1] == 1 and state[j, 2 * nd + 2] == 1:
            nog += 1
    return G, nog


@njit(**_NB)
def pick_growable(rng, j, state, grow, nodes, nnodes, G):
    target = rng.integers(0, G)
    seen = 0
    for k in range(nnodes[j]):
        nd = nodes[j, k]
        if state[j, nd] == 1 and grow[j, nd]:
            if seen == target:
                return nd
            seen += 1
    return -1


@njit(**_NB)
def pick_nog(rng, j, state, nodes, nnodes, nog):
    target = rng.integers(0, nog)
    seen = 0
    for k in range(nnodes[j]):
        nd = nodes[j, k]
        if state[j, nd] == 2 and state[j, 2 * nd + 1] == 1 and state[j, 2 * nd + 2] == 1:
            if seen == target:
                return nd
            seen += 1
    return -1


@njit(**_NB)
def sibling_is_leaf(j, state, nd):
    if nd == 0:
        return False
    sib = nd + 1 if nd % 2 == 1 else nd - 1
    return state[j, sib] == 1


@njit(**_NB)
def remove_node(j, nodes, nnodes, nd):
    for k in range(nnodes[j]):
        if nodes[j, k] == nd:
            nodes[j, k] = nodes[j, nnodes[j] - 1]
            nnodes[j] -= 1
            return


@njit(**_NB)
def move_prob(p_move, p_grow, p_prune, p_change, can_grow, can_pc):
    tot = 0.0
    if can_grow:
        tot += p_grow
    if can_pc:
        tot += p_prune + p_change
    return p_move / tot


@njit(**_NB)
def propose_tree(rng, j, var, cut, state, grow, nodes, nnodes, leaf_of,
                 xb, ncuts, w, R, sigma2, tau2, nu, beta, max_depth, min_leaf,
                 p_grow, p_prune, p_change, s, cum_s, depth_of,
                 idx, idx_l, idx_r, buf, lo_buf, hi_buf, Wacc, Sacc):
    """One Metropolis-Hastings structure move on tree ``j`` against partial residual ``R``.

    Returns ``(move, accepted, covariate)``; ``covariate`` is the splitting
    variable drawn by a grow/change proposal (-1 otherwise), reported even
    when the proposal is rejected. ``Wacc`` / ``Sacc`` hold the per-leaf
    sufficient statistics on entry and are kept current on acceptance.
    """
    G, nog = count_moves(j, state, grow, nodes, nnodes)
    can_grow = G > 0
    can_pc = nog > 0
    tot = (p_grow if can_grow else 0.0) + ((p_prune + p_change) if can_pc else 0.0)
    if tot <= 0.0:
        return MOVE_NONE, False, -1
    u = rng.random() * tot
    if can_grow and u < p_grow:
        move = MOVE_GROW
    elif can_pc:
        u2 = u - (p_grow if can_grow else 0.0)
        move = MOVE_PRUNE if u2 < p_prune else MOVE_CHANGE
    else:
        move = MOVE_GROW

    if move == MOVE_GROW:
        nd = pick_growable(rng, j, state, grow, nodes, nnodes, G)
        d = depth_of[nd]
        cnt = members(leaf_of[j], nd, idx)
        v, c = draw_rule(rng, xb, ncuts, s, cum_s, idx, cnt, w, min_leaf, buf, lo_buf, hi_buf)
        if v < 0:
            return move, False, -1
        WL, SL, WR, SR, nl, nr = split_stats(xb, v, c, idx, cnt, w, R, idx_l, idx_r)
        gl = is_growable(xb, ncuts, idx_l, nl, w, min_leaf, d + 1, max_depth, buf)
        gr = is_growable(xb, ncuts, idx_r, nr, w, min_leaf, d + 1, max_depth, buf)
        nog_new = nog + 1
        if sibling_is_leaf(j, state, nd):
            nog_new -= 1
        G_new = G - 1 + (1 if gl else 0) + (1 if gr else 0)
        lr = (math.log(move_prob(p_prune, p_grow, p_prune, p_change, G_new > 0, True))
              - math.log(move_prob(p_grow, p_grow, p_prune, p_change, True, can_pc))
              + math.log(G) - math.log(nog_new))
        lr += log_split_prob(d, nu, beta) - log_leaf_prior(True, d, nu, beta)
        lr += log_leaf_prior(gl, d + 1, nu, beta) + log_leaf_prior(gr, d + 1, nu, beta)
        lr += (log_marginal(WL, SL, sigma2, tau2) + log_marginal(WR, SR, sigma2, tau2)
               - log_marginal(WL + WR, SL + SR, sigma2, tau2))
        if math.log(rng.random()) < lr:
            left = 2 * nd + 1
            right = left + 1
            state[j, nd] = 2
            var[j, nd] = v
            cut[j, nd] = c
            state[j, left] = 1
            state[j, right] = 1
            grow[j, left] = gl
            grow[j, right] = gr
            Wacc[left] = WL
            Sacc[left] = SL
            Wacc[right] = WR
            Sacc[right] = SR
            nodes[j, nnodes[j]] = left
            nodes[j, nnodes[j] + 1] = right
            nnodes[j] += 2
            for k in range(nl):
                leaf_of[j, idx_l[k]] = left
            for k in range(nr):
                leaf_of[j, idx_r[k]] = right
            return move, True, v
        return move, False, v

    nd = pick_nog(rng, j, state, nodes, nnodes, nog)
    d = depth_of[nd]
    left = 2 * nd + 1
    right = left + 1
    if move == MOVE_PRUNE:
        WL, SL, WR, SR = Wacc[left], Sacc[left], Wacc[right], Sacc[right]
        gl = grow[j, left]
        gr = grow[j, right]
        G_new = G + 1 - (1 if gl else 0) - (1 if gr else 0)
        nog_new = nog - 1
        if sibling_is_leaf(j, state, nd):
            nog_new += 1
        lr = (math.log(move_prob(p_grow, p_grow, p_prune, p_change, True, nog_new > 0))
              - math.log(move_prob(p_prune, p_grow, p_prune, p_change, can_grow, True))
              + math.log(nog) - math.log(G_new))
        lr += log_leaf_prior(True, d, nu, beta) - log_split_prob(d, nu, beta)
        lr -= log_leaf_prior(gl, d + 1, nu, beta) + log_leaf_prior(gr, d + 1, nu, beta)
        lr += (log_marginal(WL + WR, SL + SR, sigma2, tau2)
               - log_marginal(WL, SL, sigma2, tau2) - log_marginal(WR, SR, sigma2, tau2))
        if math.log(rng.random()) < lr:
            state[j, left] = 0
            state[j, right] = 0
            state[j, nd] = 1
            var[j, nd] = -1
            cut[j, nd] = -1
            grow[j, nd] = True
            Wacc[nd] = WL + WR
            Sacc[nd] = SL + SR
            remove_node(j, nodes, nnodes, left)
            remove_node(j, nodes, nnodes, right)
            row = leaf_of[j]
            for i in range(row.shape[0]):
                if row[i] == left or row[i] == right:
                    row[i] = nd
            return move, True, -1
        return move, False, -1

    # change
    cnt = members2(leaf_of[j], left, right, idx)
    WL, SL, WR, SR = Wacc[left], Sacc[left], Wacc[right], Sacc[right]
    gl = grow[j, left]
    gr = grow[j, right]
    v, c = draw_rule(rng, xb, ncuts, s, cum_s, idx, cnt, w, min_leaf, buf, lo_buf, hi_buf)
    if v < 0:
        return move, False, -1
    WL2, SL2, WR2, SR2, nl2, nr2 = split_stats(xb, v, c, idx, cnt, w, R, idx_l, idx_r)
    gl2 = is_growable(xb, ncuts, idx_l, nl2, w, min_leaf, d + 1, max_depth, buf)
    gr2 = is_growable(xb, ncuts, idx_r, nr2, w, min_leaf, d + 1, max_depth, buf)
    G_new = G - (1 if gl else 0) - (1 if gr else 0) + (1 if gl2 else 0) + (1 if gr2 else 0)
    lr = (math.log(move_prob(p_change, p_grow, p_prune, p_change, G_new > 0, True))
          - math.log(move_prob(p_change, p_grow, p_prune, p_change, can_grow, True)))
    lr += (log_leaf_prior(gl2, d + 1, nu, beta) + log_leaf_prior(gr2, d + 1, nu, beta)
           - log_leaf_prior(gl, d + 1, nu, beta) - log_leaf_prior(gr, d + 1, nu, beta))
    lr += (log_marginal(WL2, SL2, sigma2, tau2) + log_marginal(WR2, SR2, sigma2, tau2)
           - log_marginal(WL, SL, sigma2, tau2) - log_marginal(WR, SR, sigma2, tau2))
    if math.log(rng.random()) < lr:
        var[j, nd] = v
        cut[j, nd] = c
        grow[j, left] = gl2
        grow[j, right] = gr2
        Wacc[left] = WL2
        Sacc[left] = SL2
        Wacc[right] = WR2
        Sacc[right] = SR2
        for k in range(nl2):
            leaf_of[j, idx_l[k]] = left
        for k in range(nr2):
            leaf_of[j, idx_r[k]] = right
        return move, True, v
    return move, False, v


@njit(**_NB)
def residual_pass(j, value, leaf_of, F, r, w, Fm, R, Wacc, Sacc, nodes, nnodes):
    """Partial residual for tree ``j`` plus its per-leaf statistics, in one pass."""
    for k in range(nnodes[j]):
        nd = nodes[j, k]
        Wacc[nd] = 0.0
        Sacc[nd] = 0.0
    row = leaf_of[j]
    vals = value[j]
    for i in range(row.shape[0]):
        nd = row[i]
        fm = F[i] - vals[nd]
        wi = w[i]
        ri = r[i] - wi * fm
        Fm[i] = fm
        R[i] = ri
        Wacc[nd] += wi * wi
        Sacc[nd] += wi * ri


@njit(**_NB)
def sample_leaves(rng, j, value, state, nodes, nnodes, sigma2, tau2, Wacc, Sacc):
    for k in range(nnodes[j]):
        nd = nodes[j, k]
        if state[j, nd] == 1:
            post_var = 1.0 / (Wacc[nd] / sigma2 + 1.0 / tau2)
            mean = post_var * Sacc[nd] / sigma2
            value[j, nd] = mean + math.sqrt(post_var) * rng.standard_normal()


@njit(**_NB)
def sweep(rng, var, cut, value, state, grow, nodes, nnodes, leaf_of,
          xb, ncuts, w, r, F, sigma2, tau2, nu, beta, max_depth, min_leaf,
          p_grow, p_prune, p_change, s, attempts, move_stats):
    """Update every tree once against target ``r``; ``F`` holds the forest fit and is kept current.

    ``attempts[v]`` is incremented for each grow/change proposal on ``v``.
    ``move_stats[move, 0/1]`` accumulates proposals / acceptances.
    """
    m = var.shape[0]
    cap = var.shape[1]
    n = r.shape[0]
    p = xb.shape[0]
    depth_of = depth_table(cap)
    cum_s = np.cumsum(s)
    idx = np.empty(n, dtype=np.int64)
    idx_l = np.empty(n, dtype=np.int64)
    idx_r = np.empty(n, dtype=np.int64)
    buf = np.empty(n, dtype=np.int32)
    lo_buf = np.empty(p, dtype=np.int64)
    hi_buf = np.empty(p, dtype=np.int64)
    Wacc = np.empty(cap)
    Sacc = np.empty(cap)
    Fm = np.empty(n)
    R = np.empty(n)
    for j in range(m):
        residual_pass(j, value, leaf_of, F, r, w, Fm, R, Wacc, Sacc, nodes, nnodes)
        mv, acc, v = propose_tree(rng, j, var, cut, state, grow, nodes, nnodes, leaf_of,
                                  xb, ncuts, w, R, sigma2, tau2, nu, beta, max_depth, min_leaf,
                                  p_grow, p_prune, p_change, s, cum_s, depth_of,
                                  idx, idx_l, idx_r, buf, lo_buf, hi_buf, Wacc, Sacc)
        if mv >= 0:
            move_stats[mv, 0] += 1
            if acc:
                move_stats[mv, 1] += 1
        if v >= 0:
            attempts[v] += 1
        sample_leaves(rng, j, value, state, nodes, nnodes, sigma2, tau2, Wacc, Sacc)
        row = leaf_of[j]
        vals = value[j]
        for i in range(n):
            F[i] = Fm[i] + vals[row[i]]


@njit(**_NB)
def init_forest(var, cut, value, state, grow, nodes, nnodes, leaf_of, xb, ncuts, w,
                min_leaf, max_depth, init_value):
    m = var.shape[0]
    n = leaf_of.shape[1]
    idx = np.arange(n)
    buf = np.empty(n, dtype=np.int32)
    g = is_growable(xb, ncuts, idx, n, w, min_leaf, 0, max_depth, buf)
    for j in range(m):
        var[j, :] = -1
        cut[j, :] = -1
        value[j, :] = 0.0
        state[j, :] = 0
        grow[j, :] = False
        state[j, 0] = 1
        value[j, 0] = init_value
        grow[j, 0] = g
        nodes[j, 0] = 0
        nnodes[j] = 1
        leaf_of[j, :] = 0


@njit(**_NB)
def predict_forest(var, cut, value, state, xb):
    m = var.shape[0]
    n = xb.shape[1]
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for j in range(m):
            nd = 0
            while state[j, nd] == 2:
                if xb[var[j, nd], i] <= cut[j, nd]:
                    nd = 2 * nd + 1
                else:
                    nd = 2 * nd + 2
            acc += value[j, nd]
        out[i] = acc
    return out


@njit(**_NB)
def split_counts(var, state, nodes, nnodes, p):
    out = np.zeros(p, dtype=np.int64)
    for j in range(var.shape[0]):
        for k in range(nnodes[j]):
            nd = nodes[j, k]
            if state[j, nd] == 2:
                out[var[j, nd]] += 1
    return out


@njit(**_NB)
def std_normal_lower_tail(rng, a):
    """Draw from N(0, 1) truncated to ``[a, inf)``."""
    if a < 0.45:
        while True:
            z = rng.standard_normal()
            if z >= a:
                return z
    alpha = 0.5 * (a + math.sqrt(a * a + 4.0))
    while True:
        z = a + rng.exponential() / alpha
        if math.log(rng.random()) < -0.5 * (z - alpha) ** 2:
            return z


@njit(**_NB)
def probit_latents(rng, mean, z, out):
    for i in range(mean.shape[0]):
        if z[i] > 0.5:
            out[i] = mean[i] + std_normal_lower_tail(rng, -mean[i])
        else:
            out[i] = mean[i] - std_normal_lower_tail(rng, mean[i])
