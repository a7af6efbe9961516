"""Compiled inner loops for tree growing, routing and leaf aggregation."""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def grow_tree(X, y, sample, min_leaf, max_depth, mtry, feat_noise):
    """Grow one variance-reduction tree on the rows listed in ``sample``.

    Returns node arrays (feature, threshold, left, right, start, end), the
    reordered sample array whose ``[start, end)`` segments are node members,
    and the node count. ``feature == -1`` marks a leaf.
    """
    n_s = sample.shape[0]
    p = X.shape[1]
    cap = 2 * n_s + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    start = np.zeros(cap, np.int64)
    end = np.zeros(cap, np.int64)
    depth = np.zeros(cap, np.int64)
    order = sample.copy()
    scratch = np.empty(n_s, np.int64)

    start[0] = 0
    end[0] = n_s
    n_nodes = 1
    stack = [0]
    all_features = np.arange(p)
    while len(stack) > 0:
        node = stack.pop()
        s = start[node]
        e = end[node]
        m = e - s
        if m < 2 * min_leaf:
            continue
        if max_depth >= 0 and depth[node] >= max_depth:
            continue
        ys = np.empty(m)
        for i in range(m):
            ys[i] = y[order[s + i]]
        constant = True
        for i in range(1, m):
            if ys[i] != ys[0]:
                constant = False
                break
        if constant:
            continue
        ys = ys - ys.mean()

        if mtry >= p:
            cands = all_features
        else:
            cands = np.sort(np.argsort(feat_noise[node])[:mtry])

        total = 0.0
        total2 = 0.0
        for i in range(m):
            total += ys[i]
            total2 += ys[i] * ys[i]

        best_sse = np.inf
        best_f = -1
        best_thr = 0.0
        for f in cands:
            xs = np.empty(m)
            for i in range(m):
                xs[i] = X[order[s + i], f]
            perm = np.argsort(xs, kind="mergesort")
            sl = 0.0
            sl2 = 0.0
            for i in range(1, m):
                v = ys[perm[i - 1]]
                sl += v
                sl2 += v * v
                if i < min_leaf or m - i < min_leaf:
                    continue
                x_lo = xs[perm[i - 1]]
                x_hi = xs[perm[i]]
                if not x_lo < x_hi:
                    continue
                sr = total - sl
                sr2 = total2 - sl2
                sse = (sl2 - sl * sl / i) + (sr2 - sr * sr / (m - i))
                if sse < best_sse:
                    best_sse = sse
                    best_f = f
                    thr = 0.5 * (x_lo + x_hi)
                    if thr >= x_hi:
                        thr = x_lo
                    best_thr = thr
        if best_f < 0:
            continue

        # stable partition of the segment
        n_left = 0
        for i in range(m):
            r = order[s + i]
            if X[r, best_f] <= best_thr:
                scratch[n_left] = r
                n_left += 1
        k = n_left
        for i in range(m):
            r = order[s + i]
            if not X[r, best_f] <= best_thr:
                scratch[k] = r
                k += 1
        for i in range(m):
            order[s + i] = scratch[i]

        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = lc
        right[node] = rc
        start[lc] = s
        end[lc] = s + n_left
        start[rc] = s + n_left
        end[rc] = e
        depth[lc] = depth[node] + 1
        depth[rc] = depth[node] + 1
        stack.append(rc)
        stack.append(lc)

    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes],
            right[:n_nodes], start[:n_nodes], end[:n_nodes], order, n_nodes)


@njit(cache=True, nogil=True)
def apply_trees(X, feature, threshold, left, right, roots):
    """Global leaf node id reached by every row of X in every tree."""
    m = X.shape[0]
    B = roots.shape[0]
    out = np.empty((m, B), np.int64)
    for j in range(m):
        for b in range(B):
            node = roots[b]
            while feature[node] >= 0:
                if X[j, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[j, b] = node
    return out


@njit(cache=True, nogil=True)
def leaf_cdf(val_ptr, val_count, leaf_size, is_leaf):
    """Per-leaf cumulative distribution over each leaf's distinct values."""
    out = np.zeros(val_count.shape[0])
    for node in range(val_ptr.shape[0] - 1):
        if not is_leaf[node]:
            continue
        a = val_ptr[node]
        z = val_ptr[node + 1]
        if z == a:
            continue
        s = leaf_size[node]
        running = 0.0
        for e in range(a, z):
            running += val_count[e] / s
            c = running / 1.0
            out[e] = c if c < 1.0 else 1.0
        out[z - 1] = 1.0
    return out


@njit(cache=True, nogil=True)
def forest_cdf(leaf_ids, val_ptr, val_id, val_count, leaf_size, n_values):
    """Forest conditional CDF on the support reached by each query row.

    Returns CSR arrays (ptr, value ids, cdf). The cdf is accumulated tree by
    tree per distinct value, summed in value order, then divided by B, so a
    one-tree forest reproduces the per-leaf cdf bit for bit.
    """
    m, B = leaf_ids.shape
    bound = 0
    for j in range(m):
        for b in range(B):
            node = leaf_ids[j, b]
            bound += val_ptr[node + 1] - val_ptr[node]
    ptr = np.zeros(m + 1, np.int64)
    ids = np.empty(bound, np.int64)
    cdf = np.empty(bound)
    acc = np.zeros(n_values)
    mark = np.zeros(n_values, np.bool_)
    touched = np.empty(n_values, np.int64)
    pos = 0
    for j in range(m):
        nt = 0
        for b in range(B):
            node = leaf_ids[j, b]
            s = leaf_size[node]
            for e in range(val_ptr[node], val_ptr[node + 1]):
                v = val_id[e]
                if not mark[v]:
                    mark[v] = True
                    touched[nt] = v
                    nt += 1
                acc[v] += val_count[e] / s
        tv = np.sort(touched[:nt])
        running = 0.0
        for i in range(nt):
            v = tv[i]
            running += acc[v]
            c = running / B
            ids[pos + i] = v
            cdf[pos + i] = c if c < 1.0 else 1.0
            acc[v] = 0.0
            mark[v] = False
        if nt > 0:
            cdf[pos + nt - 1] = 1.0
        pos += nt
        ptr[j + 1] = pos
    return ptr, ids[:pos], cdf[:pos]


@njit(cache=True, nogil=True)
def forest_weights(leaf_ids, idx_ptr, idx_member, idx_count, leaf_size, n_train):
    m, B = leaf_ids.shape
    w = np.zeros((m, n_train))
    for j in range(m):
        for b in range(B):
            node = leaf_ids[j, b]
            s = leaf_size[node]
            for e in range(idx_ptr[node], idx_ptr[node + 1]):
                w[j, idx_member[e]] += idx_count[e] / s
    return w / B


@njit(cache=True, nogil=True)
def leaf_members(feature, start, end, order):
    """Distinct training indices and multiplicities held by each leaf (CSR)."""
    n_nodes = feature.shape[0]
    ptr = np.zeros(n_nodes + 1, np.int64)
    member = np.empty(order.shape[0], np.int64)
    count = np.empty(order.shape[0], np.int64)
    pos = 0
    for node in range(n_nodes):
        if feature[node] < 0 and end[node] > start[node]:
            seg = np.sort(order[start[node]:end[node]])
            member[pos] = seg[0]
            count[pos] = 1
            for i in range(1, seg.shape[0]):
                if seg[i] == member[pos]:
                    count[pos] += 1
                else:
                    pos += 1
                    member[pos] = seg[i]
                    count[pos] = 1
            pos += 1
        ptr[node + 1] = pos
    return ptr, member[:pos], count[:pos]
