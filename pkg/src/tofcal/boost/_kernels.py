"""numba kernels for histogram tree growth and ensemble traversal."""

import numba
import numpy as np


@numba.njit(cache=True)
def bin_matrix(X, edges, n_edges, out):
    n, n_feat = X.shape
    for i in range(n):
        for f in range(n_feat):
            x = X[i, f]
            ne = n_edges[f]
            if np.isnan(x):
                out[i, f] = ne + 1  # missing bin sits after the ne + 1 value bins
                continue
            lo = 0
            hi = ne
            # number of edges <= x
            while lo < hi:
                mid = (lo + hi) >> 1
                if edges[f, mid] <= x:
                    lo = mid + 1
                else:
                    hi = mid
            out[i, f] = lo


@numba.njit(cache=True)
def _build_hist(bins, grad, idx, start, end, hist, n_vbins):
    n_feat = bins.shape[1]
    for f in range(n_feat):
        for b in range(n_vbins[f] + 1):
            hist[f, b, 0] = 0.0
            hist[f, b, 1] = 0.0
    for p in range(start, end):
        i = idx[p]
        g = grad[i]
        for f in range(n_feat):
            b = bins[i, f]
            hist[f, b, 0] += g
            hist[f, b, 1] += 1.0


@numba.njit(cache=True)
def _subtract(parent, child, n_vbins):
    for f in range(parent.shape[0]):
        for b in range(n_vbins[f] + 1):
            parent[f, b, 0] -= child[f, b, 0]
            parent[f, b, 1] -= child[f, b, 1]


@numba.njit(cache=True)
def _best_split(hist, n_vbins, G, H, min_leaf, lam, min_gain):
    n_feat = hist.shape[0]
    parent = G * G / (H + lam)
    best_gain = min_gain
    best_f = -1
    best_b = -1
    best_dl = False
    for f in range(n_feat):
        nb = n_vbins[f]
        mg = hist[f, nb, 0]
        mh = hist[f, nb, 1]
        gl = 0.0
        hl = 0.0
        for b in range(nb - 1):
            cnt = hist[f, b, 1]
            if cnt == 0.0:
                continue
            gl += hist[f, b, 0]
            hl += cnt
            # missing samples to the right
            hr = H - hl
            if hl >= min_leaf and hr >= min_leaf:
                gr = G - gl
                gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_b = b
                    best_dl = False if mh > 0.0 else hl >= hr
            if mh > 0.0:
                hl2 = hl + mh
                hr2 = H - hl2
                if hl2 >= min_leaf and hr2 >= min_leaf:
                    gl2 = gl + mg
                    gr2 = G - gl2
                    gain = gl2 * gl2 / (hl2 + lam) + gr2 * gr2 / (hr2 + lam) - parent
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        best_b = b
                        best_dl = True
    return best_gain, best_f, best_b, best_dl


@numba.njit(cache=True)
def _partition(bins, idx, start, end, f, b, dl, missing_bin, buf):
    nl = 0
    nr = 0
    for p in range(start, end):
        i = idx[p]
        v = bins[i, f]
        if v == missing_bin:
            go_left = dl
        else:
            go_left = v <= b
        if go_left:
            idx[start + nl] = i
            nl += 1
        else:
            buf[nr] = i
            nr += 1
    for k in range(nr):
        idx[start + nl + k] = buf[k]
    return start + nl


@numba.njit(cache=True)
def grow_tree(bins, grad, n_vbins, max_depth, min_leaf, lam, min_gain, max_bins, idx, buf):
    """Depth-first tree growth with histogram subtraction.

    ``grad`` holds ``prediction - label``. Returns node arrays; leaf values are
    ``-G / (H + lam)``. ``idx`` is reordered so every leaf owns a contiguous range.
    """
    n, n_feat = bins.shape
    max_nodes = 2 * (n // max(min_leaf, 1)) + 3
    cap = 2 ** (max_depth + 1) - 1
    if cap > 0 and cap < max_nodes:
        max_nodes = cap
    feat = np.full(max_nodes, -1, np.int32)
    tbin = np.zeros(max_nodes, np.int32)
    dleft = np.zeros(max_nodes, np.bool_)
    left = np.full(max_nodes, -1, np.int32)
    right = np.full(max_nodes, -1, np.int32)
    value = np.zeros(max_nodes)
    cover = np.zeros(max_nodes)
    gain = np.zeros(max_nodes)
    nstart = np.zeros(max_nodes, np.int64)
    nend = np.zeros(max_nodes, np.int64)
    depth_of = np.zeros(max_nodes, np.int32)

    hists = np.zeros((max_depth + 2, n_feat, max_bins, 2))
    stack = np.zeros(max_depth + 2, np.int32)
    sums = np.zeros((max_nodes, 2))

    for p in range(n):
        idx[p] = p
    G = 0.0
    for p in range(n):
        G += grad[p]
    n_nodes = 1
    nstart[0] = 0
    nend[0] = n
    sums[0, 0] = G
    sums[0, 1] = n
    _build_hist(bins, grad, idx, 0, n, hists[0], n_vbins)
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        Gn = sums[node, 0]
        Hn = sums[node, 1]
        cover[node] = Hn
        value[node] = -Gn / (Hn + lam)
        split_ok = depth_of[node] < max_depth and Hn >= 2 * min_leaf and n_nodes + 2 <= max_nodes
        if split_ok:
            g, f, b, dl = _best_split(hists[top], n_vbins, Gn, Hn, min_leaf, lam, min_gain)
            split_ok = f >= 0
        if not split_ok:
            continue
        mid = _partition(bins, idx, nstart[node], nend[node], f, b, dl, n_vbins[f], buf)
        feat[node] = f
        tbin[node] = b
        dleft[node] = dl
        gain[node] = g
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        nstart[lc] = nstart[node]
        nend[lc] = mid
        nstart[rc] = mid
        nend[rc] = nend[node]
        depth_of[lc] = depth_of[node] + 1
        depth_of[rc] = depth_of[node] + 1
        nl = mid - nstart[node]
        nr = nend[node] - mid
        small, large = (lc, rc) if nl <= nr else (rc, lc)
        gs = 0.0
        for p in range(nstart[small], nend[small]):
            gs += grad[idx[p]]
        sums[small, 0] = gs
        sums[small, 1] = nend[small] - nstart[small]
        sums[large, 0] = Gn - gs
        sums[large, 1] = nend[large] - nstart[large]
        child_depth = depth_of[node] + 1
        need_small = child_depth < max_depth and sums[small, 1] >= 2 * min_leaf
        need_large = child_depth < max_depth and sums[large, 1] >= 2 * min_leaf
        # histograms are only needed for children that may split again
        if need_small and need_large:
            _build_hist(bins, grad, idx, nstart[small], nend[small], hists[top + 1], n_vbins)
            _subtract(hists[top], hists[top + 1], n_vbins)
        elif need_large:
            _build_hist(bins, grad, idx, nstart[large], nend[large], hists[top], n_vbins)
        elif need_small:
            _build_hist(bins, grad, idx, nstart[small], nend[small], hists[top + 1], n_vbins)
        # larger child keeps the parent slot, smaller one is processed next
        stack[top] = large
        stack[top + 1] = small
        top += 2
    return (feat[:n_nodes], tbin[:n_nodes], dleft[:n_nodes], left[:n_nodes], right[:n_nodes],
            value[:n_nodes], cover[:n_nodes], gain[:n_nodes], nstart[:n_nodes], nend[:n_nodes])


@numba.njit(cache=True)
def apply_leaves(pred, idx, feat, value, nstart, nend, lr):
    for node in range(feat.shape[0]):
        if feat[node] < 0:
            v = lr * value[node]
            for p in range(nstart[node], nend[node]):
                pred[idx[p]] += v


@numba.njit(cache=True)
def traverse(x, feat, thr, dleft, left, right, root):
    node = root
    while feat[node] >= 0:
        v = x[feat[node]]
        if np.isnan(v):
            node = left[node] if dleft[node] else right[node]
        elif v < thr[node]:
            node = left[node]
        else:
            node = right[node]
    return node


@numba.njit(cache=True)
def predict_add(X, feat, thr, dleft, left, right, value, root, lr, out):
    for i in range(X.shape[0]):
        leaf = traverse(X[i], feat, thr, dleft, left, right, root)
        out[i] += lr * value[leaf]


@numba.njit(cache=True)
def predict_ensemble(X, feat, thr, dleft, left, right, value, roots, n_trees, lr, base, out):
    for i in range(X.shape[0]):
        s = base
        for t in range(n_trees):
            leaf = traverse(X[i], feat, thr, dleft, left, right, roots[t])
            s += lr * value[leaf]
        out[i] = s
