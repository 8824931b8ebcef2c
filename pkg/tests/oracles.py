"""Independent reference computations used by the test-suite."""

import itertools
import math

import numpy as np


def cond_expectation(tree, x, subset, node=0):
    """E[f(x) | x_S] with cover weighting, by direct recursion."""
    f = tree.feature[node]
    if f < 0:
        return tree.value[node]
    l, r = tree.left[node], tree.right[node]
    if f in subset:
        v = x[f]
        if np.isnan(v):
            nxt = l if tree.default_left[node] else r
        else:
            nxt = l if v < tree.threshold[node] else r
        return cond_expectation(tree, x, subset, nxt)
    w = tree.cover[node]
    return (tree.cover[l] * cond_expectation(tree, x, subset, l)
            + tree.cover[r] * cond_expectation(tree, x, subset, r)) / w


def brute_force_shap(tree, x, n_features):
    """Shapley values by enumerating every feature subset."""
    M = n_features
    phi = np.zeros(M)
    cache = {}

    def v(s):
        if s not in cache:
            cache[s] = cond_expectation(tree, x, set(s))
        return cache[s]

    for i in range(M):
        others = [j for j in range(M) if j != i]
        for k in range(M):
            wk = math.factorial(k) * math.factorial(M - k - 1) / math.factorial(M)
            for s in itertools.combinations(others, k):
                phi[i] += wk * (v(tuple(sorted(s + (i,)))) - v(s))
    return phi


def random_tree(rng, n_features, max_depth, p_split=0.8):
    """Random regression tree with positive covers that add up at every split."""
    from tofcal.boost import Tree

    feat, thr, dl, left, right, value, cover = [], [], [], [], [], [], []

    def grow(depth, c):
        node = len(feat)
        for lst, v in ((feat, -1), (thr, 0.0), (dl, False), (left, -1), (right, -1), (value, 0.0), (cover, c)):
            lst.append(v)
        if depth < max_depth and rng.random() < p_split:
            feat[node] = int(rng.integers(n_features))
            thr[node] = float(rng.normal())
            dl[node] = bool(rng.random() < 0.5)
            share = rng.uniform(0.1, 0.9)
            left[node] = grow(depth + 1, c * share)
            right[node] = grow(depth + 1, c * (1 - share))
        else:
            value[node] = float(rng.normal(0, 10))
        return node

    grow(0, float(rng.integers(50, 500)))
    return Tree(np.array(feat, np.int32), np.array(thr), np.array(dl, bool), np.array(left, np.int32),
                np.array(right, np.int32), np.array(value), np.array(cover))
