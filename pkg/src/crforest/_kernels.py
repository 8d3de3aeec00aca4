"""Compiled inner loops.

Everything here works on flat arrays: row-major covariates, a cluster
offset vector ``ptr`` (cluster ``i`` owns rows ``ptr[i]:ptr[i+1]``) and an
integer leaf id per row. The public modules wrap these with validation.
"""
import numpy as np
from numba import njit

IDENTITY = 0
EQUICORR = 1
AR1 = 2

# CG status codes
CG_OK = 0
CG_CAP = 1
CG_BREAKDOWN = 2


# ---------------------------------------------------------------- splitting

@njit(cache=True, nogil=True)
def scan_feature(xs, ys, k, alpha):
    """Best admissible cut of presorted ``xs`` for responses ``ys``.

    Returns ``(gain, threshold, n_left)``; ``n_left == -1`` when no cut is
    admissible. Ties keep the first (smallest) threshold.
    """
    n = xs.size
    best_gain = -1.0
    best_thr = 0.0
    best_t = -1
    if n < 2:
        return best_gain, best_thr, best_t
    mean = 0.0
    raw = 0.0
    for i in range(n):
        mean += ys[i]
        raw += ys[i] * ys[i]
    mean /= n
    sse = 0.0
    for i in range(n):
        sse += (ys[i] - mean) ** 2
    flat = sse <= 1e-24 * (raw + 1e-300)
    tol = 0.0 if flat else 1e-12 * sse
    total = 0.0
    for i in range(n):
        total += ys[i] - mean
    floor_frac = alpha * n - 1e-9
    left = 0.0
    for t in range(1, n):
        left += ys[t - 1] - mean
        if xs[t - 1] >= xs[t]:
            continue
        nl = t
        nr = n - t
        if nl < k or nr < k or nl < floor_frac or nr < floor_frac:
            continue
        if flat:
            gain = 0.0
        else:
            right = total - left
            # n_l n_r / n (mean_l - mean_r)^2 written with centred sums
            gain = left * left / nl + right * right / nr
        if best_t < 0 or gain > best_gain + tol:
            best_gain = gain
            best_t = t
            thr = 0.5 * (xs[t - 1] + xs[t])
            if thr >= xs[t]:
                thr = xs[t - 1]
            best_thr = thr
    if best_t >= 0 and best_gain < 0.0:
        best_gain = 0.0
    return best_gain, best_thr, best_t


@njit(cache=True, nogil=True)
def _required_features(counts, depth, pi_frac, d):
    """Mask of features that must take the next split on this path."""
    need = np.zeros(d, dtype=np.bool_)
    share = pi_frac / d
    r_now = int(np.floor(depth * share + 1e-9))
    r_next = r_now + 1
    c_next = int(np.ceil(r_next / share - 1e-9))
    slots = c_next - depth
    n_need = 0
    for f in range(d):
        if counts[f] < r_next:
            n_need += 1
    if n_need >= slots:
        for f in range(d):
            if counts[f] < r_next:
                need[f] = True
        return need, True
    return need, False


@njit(cache=True, nogil=True)
def grow_tree(X, y, k, alpha, pi_frac, mtry, noise, root_lo, root_hi):
    """Recursive CART growth with size, regularity and proportion rules.

    Nodes are expanded depth first, left child first, so leaf ids follow
    the left-to-right order of the tree.
    """
    n, d = X.shape
    cap = 2 * max(n, 1) + 1
    feature = -np.ones(cap, dtype=np.int64)
    threshold = np.zeros(cap)
    left = -np.ones(cap, dtype=np.int64)
    right = -np.ones(cap, dtype=np.int64)
    leaf_of = -np.ones(cap, dtype=np.int64)
    start = np.zeros(cap, dtype=np.int64)
    stop = np.zeros(cap, dtype=np.int64)
    depth = np.zeros(cap, dtype=np.int64)
    path = np.zeros((cap, d), dtype=np.int64)
    lo = np.empty((cap, d))
    hi = np.empty((cap, d))
    leaf_node = np.empty(cap, dtype=np.int64)
    leaf_sat = np.zeros(cap, dtype=np.bool_)

    idx = np.arange(n)
    buf = np.empty(n, dtype=np.int64)
    xs = np.empty(n)
    ys = np.empty(n)
    cand = np.empty(d, dtype=np.int64)
    stack = np.empty(cap, dtype=np.int64)

    lo[0, :] = root_lo
    hi[0, :] = root_hi
    start[0] = 0
    stop[0] = n
    n_nodes = 1
    n_leaves = 0
    sp = 0
    stack[sp] = 0
    sp += 1
    pos = 0
    n_noise = noise.size

    while sp > 0:
        sp -= 1
        node = stack[sp]
        s = start[node]
        e = stop[node]
        cnt = e - s
        best_f = -1
        best_thr = 0.0
        best_gain = -1.0
        if cnt >= 2 * k:
            need, forced = _required_features(path[node], depth[node], pi_frac, d)
            nc = 0
            for f in range(d):
                if (not forced) or need[f]:
                    cand[nc] = f
                    nc += 1
            if mtry > 0 and mtry < nc:
                # partial Fisher-Yates driven by the pre-drawn uniforms
                for j in range(mtry):
                    u = noise[pos % n_noise] if n_noise > 0 else 0.0
                    pos += 1
                    r = j + int(u * (nc - j))
                    if r >= nc:
                        r = nc - 1
                    tmp = cand[j]
                    cand[j] = cand[r]
                    cand[r] = tmp
                nc = mtry
                cand[:nc] = np.sort(cand[:nc])
            for c in range(nc):
                f = cand[c]
                for i in range(cnt):
                    xs[i] = X[idx[s + i], f]
                order = np.argsort(xs[:cnt], kind="mergesort")
                xsort = np.empty(cnt)
                for i in range(cnt):
                    xsort[i] = xs[order[i]]
                    ys[i] = y[idx[s + order[i]]]
                gain, thr, t = scan_feature(xsort, ys[:cnt], k, alpha)
                if t < 0:
                    continue
                if best_f < 0 or gain > best_gain * (1.0 + 1e-12) + 1e-300:
                    best_f = f
                    best_thr = thr
                    best_gain = gain
        if best_f < 0:
            leaf_of[node] = n_leaves
            leaf_node[n_leaves] = node
            leaf_sat[n_leaves] = cnt >= 2 * k
            n_leaves += 1
            continue
        # stable partition of idx[s:e]
        nl = 0
        for i in range(s, e):
            if X[idx[i], best_f] <= best_thr:
                buf[nl] = idx[i]
                nl += 1
        nr = 0
        for i in range(s, e):
            if X[idx[i], best_f] > best_thr:
                buf[nl + nr] = idx[i]
                nr += 1
        for i in range(cnt):
            idx[s + i] = buf[i]
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = lc
        right[node] = rc
        for ch in (lc, rc):
            depth[ch] = depth[node] + 1
            path[ch, :] = path[node, :]
            path[ch, best_f] += 1
            lo[ch, :] = lo[node, :]
            hi[ch, :] = hi[node, :]
        hi[lc, best_f] = best_thr
        lo[rc, best_f] = best_thr
        start[lc] = s
        stop[lc] = s + nl
        start[rc] = s + nl
        stop[rc] = e
        stack[sp] = rc
        sp += 1
        stack[sp] = lc
        sp += 1

    counts = np.empty(n_leaves, dtype=np.int64)
    leaf_lo = np.empty((n_leaves, d))
    leaf_hi = np.empty((n_leaves, d))
    leaf_path = np.empty((n_leaves, d), dtype=np.int64)
    leaf_depth = np.empty(n_leaves, dtype=np.int64)
    for m in range(n_leaves):
        nd = leaf_node[m]
        counts[m] = stop[nd] - start[nd]
        leaf_lo[m, :] = lo[nd, :]
        leaf_hi[m, :] = hi[nd, :]
        leaf_path[m, :] = path[nd, :]
        leaf_depth[m] = depth[nd]
    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(),
            left[:n_nodes].copy(), right[:n_nodes].copy(),
            leaf_of[:n_nodes].copy(), counts, leaf_sat[:n_leaves].copy(),
            leaf_lo, leaf_hi, leaf_path, leaf_depth)


@njit(cache=True, nogil=True)
def route(feature, threshold, left, right, leaf_of, root, X):
    """Leaf id of every row of ``X`` (``x_f <= t`` goes left)."""
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = root
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = leaf_of[node]
    return out


@njit(cache=True, nogil=True)
def forest_predict(offsets, feature, threshold, left, right, leaf_of, roots,
                   values, value_offsets, X):
    """Per-tree predictions for packed trees, shape (n_trees, n_points)."""
    n_trees = roots.size
    n = X.shape[0]
    out = np.empty((n_trees, n))
    for t in range(n_trees):
        o = offsets[t]
        vo = value_offsets[t]
        for i in range(n):
            node = roots[t]
            while feature[o + node] >= 0:
                if X[i, feature[o + node]] <= threshold[o + node]:
                    node = left[o + node]
                else:
                    node = right[o + node]
            out[t, i] = values[vo + leaf_of[o + node]]
    return out


# ------------------------------------------------------------------ weights

@njit(cache=True, nogil=True)
def apply_weights(cls, rho, ptr, z, out):
    """``out = W(rho) z`` cluster by cluster for a flat vector ``z``."""
    n_cl = ptr.size - 1
    if cls == EQUICORR:
        scale = 1.0 / (1.0 - rho)
        for i in range(n_cl):
            s = ptr[i]
            e = ptr[i + 1]
            n = e - s
            c = rho / (1.0 + (n - 1) * rho)
            tot = 0.0
            for r in range(s, e):
                tot += z[r]
            for r in range(s, e):
                out[r] = scale * (z[r] - c * tot)
    elif cls == AR1:
        r2 = rho * rho
        for i in range(n_cl):
            s = ptr[i]
            e = ptr[i + 1]
            n = e - s
            if n == 1:
                out[s] = (1.0 - r2) * z[s]
                continue
            for r in range(s, e):
                dg = 1.0 if (r == s or r == e - 1) else 1.0 + r2
                v = dg * z[r]
                if r > s:
                    v -= rho * z[r - 1]
                if r < e - 1:
                    v -= rho * z[r + 1]
                out[r] = v
    else:
        for r in range(z.size):
            out[r] = z[r]


@njit(cache=True, nogil=True)
def normal_matvec(cls, rho, ptr, leaf, b, out):
    """``out = sum_i chi_i' W_i chi_i b`` for a block ``b`` of shape (M, c)."""
    out[:, :] = 0.0
    c = b.shape[1]
    n_cl = ptr.size - 1
    if cls == EQUICORR:
        scale = 1.0 / (1.0 - rho)
        tot = np.empty(c)
        for i in range(n_cl):
            s = ptr[i]
            e = ptr[i + 1]
            n = e - s
            w = scale * rho / (1.0 + (n - 1) * rho)
            tot[:] = 0.0
            for r in range(s, e):
                m = leaf[r]
                for q in range(c):
                    tot[q] += b[m, q]
            for r in range(s, e):
                m = leaf[r]
                for q in range(c):
                    out[m, q] += scale * b[m, q] - w * tot[q]
    elif cls == AR1:
        r2 = rho * rho
        for i in range(n_cl):
            s = ptr[i]
            e = ptr[i + 1]
            if e - s == 1:
                m = leaf[s]
                for q in range(c):
                    out[m, q] += (1.0 - r2) * b[m, q]
                continue
            for r in range(s, e):
                m = leaf[r]
                dg = 1.0 if (r == s or r == e - 1) else 1.0 + r2
                for q in range(c):
                    out[m, q] += dg * b[m, q]
                if r > s:
                    mp = leaf[r - 1]
                    for q in range(c):
                        out[m, q] -= rho * b[mp, q]
                if r < e - 1:
                    mn = leaf[r + 1]
                    for q in range(c):
                        out[m, q] -= rho * b[mn, q]
    else:
        for r in range(leaf.size):
            m = leaf[r]
            for q in range(c):
                out[m, q] += b[m, q]


@njit(cache=True, nogil=True)
def weighted_rhs(cls, rho, ptr, leaf, y, n_leaves):
    """``sum_i chi_i' W_i y_i`` as a length-M vector."""
    wy = np.empty(y.size)
    apply_weights(cls, rho, ptr, y, wy)
    out = np.zeros(n_leaves)
    for r in range(leaf.size):
        out[leaf[r]] += wy[r]
    return out


# ----------------------------------------------------------------------- CG

@njit(cache=True, nogil=True)
def block_cg(cls, rho, ptr, leaf, rhs, x, tol, max_iter):
    """Independent CG runs on each column of ``rhs``; ``x`` is the warm start
    and is overwritten with the solution.

    Returns ``(iterations, status, residual_norms)``. Residual norms are
    absolute two-norms; convergence means ``norm <= tol * ||rhs||``.
    """
    m, c = rhs.shape
    ap = np.empty((m, c))
    normal_matvec(cls, rho, ptr, leaf, x, ap)
    r = rhs - ap
    p = r.copy()
    rs = np.zeros(c)
    target = np.zeros(c)
    active = np.zeros(c, dtype=np.bool_)
    for q in range(c):
        bn = 0.0
        for j in range(m):
            rs[q] += r[j, q] * r[j, q]
            bn += rhs[j, q] * rhs[j, q]
        target[q] = tol * np.sqrt(bn)
        active[q] = np.sqrt(rs[q]) > target[q]
    it = 0
    status = CG_OK
    n_active = 0
    for q in range(c):
        if active[q]:
            n_active += 1
    while n_active > 0:
        if it >= max_iter:
            status = CG_CAP
            break
        normal_matvec(cls, rho, ptr, leaf, p, ap)
        it += 1
        for q in range(c):
            if not active[q]:
                continue
            pap = 0.0
            for j in range(m):
                pap += p[j, q] * ap[j, q]
            if not pap > 0.0:
                status = CG_BREAKDOWN
                break
            a = rs[q] / pap
            rs_new = 0.0
            for j in range(m):
                x[j, q] += a * p[j, q]
                r[j, q] -= a * ap[j, q]
                rs_new += r[j, q] * r[j, q]
            beta = rs_new / rs[q]
            rs[q] = rs_new
            if np.sqrt(rs_new) <= target[q]:
                active[q] = False
                n_active -= 1
            else:
                for j in range(m):
                    p[j, q] = r[j, q] + beta * p[j, q]
        if status != CG_OK:
            break
    return it, status, np.sqrt(rs)


@njit(cache=True, nogil=True)
def loss_curve(cls, grid, ptr, leaf, counts, eps, support, masses, tol,
               max_iter):
    """Q-weighted trace loss at every grid value.

    For each supported leaf ``m`` the column ``a_m = A^{-1} e_m`` is obtained
    by CG (warm-started from the previous grid value) and the loss adds
    ``masses[m] * sum_i (a_m' chi_i' W_i eps_i)^2``.
    Returns ``(losses, total_iterations, status)``.
    """
    n_leaves = counts.size
    c = support.size
    e = np.zeros((n_leaves, c))
    x = np.zeros((n_leaves, c))
    for q in range(c):
        e[support[q], q] = 1.0
        x[support[q], q] = 1.0 / counts[support[q]]
    losses = np.empty(grid.size)
    weps = np.empty(eps.size)
    h = np.empty(c)
    n_cl = ptr.size - 1
    total_it = 0
    status = CG_OK
    for g in range(grid.size):
        rho = grid[g]
        if cls == IDENTITY or rho == 0.0:
            for q in range(c):
                x[:, q] = 0.0
                x[support[q], q] = 1.0 / counts[support[q]]
        else:
            it, st, _ = block_cg(cls, rho, ptr, leaf, e, x, tol, max_iter)
            total_it += it
            if st != CG_OK:
                status = st
                losses[g:] = np.nan
                return losses, total_it, status
        apply_weights(cls, rho, ptr, eps, weps)
        tot = 0.0
        for i in range(n_cl):
            h[:] = 0.0
            for r in range(ptr[i], ptr[i + 1]):
                m = leaf[r]
                w = weps[r]
                for q in range(c):
                    h[q] += x[m, q] * w
            for q in range(c):
                tot += masses[q] * h[q] * h[q]
        losses[g] = tot
    return losses, total_it, status
