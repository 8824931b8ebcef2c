"""Exact Shapley attributions for tree ensembles and their aggregate analyses.

Conditional expectations follow the training covers stored in every node
(path-dependent weighting), so no background dataset is needed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numba
import numpy as np
from scipy import stats

from .boost import TreeEnsemble
from .core import FEATURE_SCHEMA, FeatureSchema


@numba.njit(cache=True)
def _extend(pf, pz, po, pw, u, zero, one, feature):
    pf[u] = feature
    pz[u] = zero
    po[u] = one
    pw[u] = 1.0 if u == 0 else 0.0
    for i in range(u - 1, -1, -1):
        pw[i + 1] += one * pw[i] * (i + 1) / (u + 1)
        pw[i] = zero * pw[i] * (u - i) / (u + 1)


@numba.njit(cache=True)
def _unwind(pf, pz, po, pw, u, k):
    one = po[k]
    zero = pz[k]
    nxt = pw[u]
    for i in range(u - 1, -1, -1):
        if one != 0.0:
            tmp = pw[i]
            pw[i] = nxt * (u + 1) / ((i + 1) * one)
            nxt = tmp - pw[i] * zero * (u - i) / (u + 1)
        else:
            pw[i] = pw[i] * (u + 1) / (zero * (u - i))
    for i in range(k, u):
        pf[i] = pf[i + 1]
        pz[i] = pz[i + 1]
        po[i] = po[i + 1]


@numba.njit(cache=True)
def _unwound_sum(pz, po, pw, u, k):
    one = po[k]
    zero = pz[k]
    nxt = pw[u]
    total = 0.0
    if one != 0.0:
        for i in range(u - 1, -1, -1):
            tmp = nxt / ((i + 1) * one)
            total += tmp
            nxt = pw[i] - tmp * zero * (u - i)
    else:
        for i in range(u - 1, -1, -1):
            total += pw[i] / (zero * (u - i))
    return total * (u + 1)


@numba.njit(cache=True)
def _tree_shap(x, feat, thr, dleft, left, right, value, cover, root, max_depth, scale, phi):
    D = max_depth + 2
    PF = np.empty((D, D + 1), np.int64)
    PZ = np.empty((D, D + 1))
    PO = np.empty((D, D + 1))
    PW = np.empty((D, D + 1))
    s_node = np.empty(2 * D + 2, np.int64)
    s_lvl = np.empty(2 * D + 2, np.int64)
    s_u = np.empty(2 * D + 2, np.int64)
    s_z = np.empty(2 * D + 2)
    s_o = np.empty(2 * D + 2)
    s_f = np.empty(2 * D + 2, np.int64)
    top = 0
    s_node[0] = root
    s_lvl[0] = 0
    s_u[0] = 0
    s_z[0] = 1.0
    s_o[0] = 1.0
    s_f[0] = -1
    top = 1
    while top > 0:
        top -= 1
        node = s_node[top]
        lvl = s_lvl[top]
        u = s_u[top]
        if lvl > 0:
            for i in range(u):
                PF[lvl, i] = PF[lvl - 1, i]
                PZ[lvl, i] = PZ[lvl - 1, i]
                PO[lvl, i] = PO[lvl - 1, i]
                PW[lvl, i] = PW[lvl - 1, i]
        pf = PF[lvl]
        pz = PZ[lvl]
        po = PO[lvl]
        pw = PW[lvl]
        _extend(pf, pz, po, pw, u, s_z[top], s_o[top], s_f[top])
        f = feat[node]
        if f < 0:
            for i in range(1, u + 1):
                w = _unwound_sum(pz, po, pw, u, i)
                phi[pf[i]] += scale * w * (po[i] - pz[i]) * value[node]
            continue
        v = x[f]
        if np.isnan(v):
            go_left = dleft[node]
        else:
            go_left = v < thr[node]
        hot = left[node] if go_left else right[node]
        cold = right[node] if go_left else left[node]
        w = cover[node]
        iz = 1.0
        io = 1.0
        k = -1
        for i in range(u + 1):
            if pf[i] == f:
                k = i
                break
        uu = u
        if k >= 0:
            iz = pz[k]
            io = po[k]
            _unwind(pf, pz, po, pw, u, k)
            uu = u - 1
        # cold first on the stack so the hot branch is expanded first
        s_node[top] = cold
        s_lvl[top] = lvl + 1
        s_u[top] = uu + 1
        s_z[top] = cover[cold] / w * iz
        s_o[top] = 0.0
        s_f[top] = f
        top += 1
        s_node[top] = hot
        s_lvl[top] = lvl + 1
        s_u[top] = uu + 1
        s_z[top] = cover[hot] / w * iz
        s_o[top] = io
        s_f[top] = f
        top += 1


@numba.njit(cache=True)
def _batch_shap(X, feat, thr, dleft, left, right, value, cover, roots, depths, lr, out):
    for i in range(X.shape[0]):
        for t in range(roots.shape[0]):
            _tree_shap(X[i], feat, thr, dleft, left, right, value, cover, roots[t], depths[t], lr, out[i])


def tree_expected_value(tree) -> float:
    leaves = tree.feature < 0
    return float(np.sum(tree.value[leaves] * tree.cover[leaves]) / tree.cover[0])


def expected_value(ensemble: TreeEnsemble) -> float:
    """Cover-weighted mean prediction: the SHAP base value."""
    ev = ensemble.base_score
    for t in ensemble.trees:
        ev += ensemble.learning_rate * tree_expected_value(t)
    return float(ev)


@dataclass
class ShapExplanation:
    base_value: float
    sv: np.ndarray  # (n, n_features) or (n_features,)
    feature_values: np.ndarray

    @property
    def output(self) -> np.ndarray:
        return self.base_value + self.sv.sum(axis=-1)


TABLE_MAX_FEATURES = 16
TABLE_BUDGET = 1 << 26  # float64 entries per tree


def _prepare_tree(tree):
    """Unique-feature path data of every leaf.

    ``pos[node]`` is the slot of the node's split feature within the unique
    feature list of its path. Leaves store those features and their zero
    fractions (cover ratios multiplied over repeated splits on one feature).
    """
    n = tree.n_nodes
    feat, left, right, cover = tree.feature, tree.left, tree.right, tree.cover
    pos = np.full(n, -1, np.int64)
    paths = {}
    stack = [(0, (), ())]
    while stack:
        node, fs, zs = stack.pop()
        f = int(feat[node])
        if f < 0:
            paths[node] = (fs, zs)
            continue
        if f in fs:
            p = fs.index(f)
        else:
            p = len(fs)
            fs, zs = fs + (f,), zs + (1.0,)
        pos[node] = p
        for c in (right[node], left[node]):
            z = list(zs)
            z[p] *= cover[c] / cover[node]
            stack.append((int(c), fs, tuple(z)))
    width = max([len(fs) for fs, _ in paths.values()] + [1])
    leaf_d = np.zeros(n, np.int64)
    leaf_feat = np.full((n, width), -1, np.int64)
    leaf_z = np.ones((n, width))
    tab_off = np.full(n, -1, np.int64)
    flag_off = np.full(n, -1, np.int64)
    n_tab = n_flag = 0
    for node, (fs, zs) in sorted(paths.items(), key=lambda kv: (len(kv[1][0]), kv[0])):
        d = len(fs)
        leaf_d[node] = d
        leaf_feat[node, :d] = fs
        leaf_z[node, :d] = zs
        if d <= TABLE_MAX_FEATURES and n_tab + (1 << d) * d <= TABLE_BUDGET:
            tab_off[node] = n_tab
            flag_off[node] = n_flag
            n_tab += (1 << d) * d
            n_flag += 1 << d
    return pos, leaf_d, leaf_feat, leaf_z, tab_off, flag_off, n_tab, n_flag


@numba.njit(cache=True)
def _leaf_contrib(d, z, fail, value, pf, pz, po, pw, out, off):
    """Contributions of one leaf to its ``d`` path features for a given set of
    unsatisfied path conditions (bit ``j`` of ``fail``)."""
    _extend(pf, pz, po, pw, 0, 1.0, 1.0, -1)
    for j in range(d):
        one = 0.0 if (fail >> j) & 1 else 1.0
        _extend(pf, pz, po, pw, j + 1, z[j], one, j)
    for i in range(1, d + 1):
        w = _unwound_sum(pz, po, pw, d, i)
        out[off + i - 1] = w * (po[i] - pz[i]) * value


@numba.njit(cache=True)
def _masked_shap(XT, feat, thr, dleft, left, right, value, pos, leaf_d, leaf_feat, leaf_z,
                 tab_off, flag_off, tables, flags, max_nodes, scale, outT, block):
    """Node-major traversal over blocks of samples.

    ``XT`` and ``outT`` are feature-major (features x samples). Every stack
    slot carries the failed-condition masks of the whole block.
    """
    n = XT.shape[1]
    width = leaf_feat.shape[1]
    pf = np.empty(width + 1, np.int64)
    pz = np.empty(width + 1)
    po = np.empty(width + 1)
    pw = np.empty(width + 1)
    tmp = np.empty(width)
    s_node = np.empty(max_nodes, np.int64)
    masks = np.empty((max_nodes, block), np.int64)
    for b0 in range(0, n, block):
        nb = min(block, n - b0)
        s_node[0] = 0
        for k in range(nb):
            masks[0, k] = 0
        top = 1
        while top > 0:
            top -= 1
            node = s_node[top]
            f = feat[node]
            if f < 0:
                d = leaf_d[node]
                if d == 0:
                    continue
                to = tab_off[node]
                fo = flag_off[node]
                val = scale * value[node]
                fl = leaf_feat[node]
                if to >= 0:
                    for k in range(nb):
                        m = masks[top, k]
                        off = to + m * d
                        if flags[fo + m] == 0:
                            _leaf_contrib(d, leaf_z[node], m, val, pf, pz, po, pw, tables, off)
                            flags[fo + m] = 1
                        for j in range(d):
                            outT[fl[j], b0 + k] += tables[off + j]
                else:
                    for k in range(nb):
                        _leaf_contrib(d, leaf_z[node], masks[top, k], val, pf, pz, po, pw, tmp, 0)
                        for j in range(d):
                            outT[fl[j], b0 + k] += tmp[j]
                continue
            t = thr[node]
            dl = dleft[node]
            bit = np.int64(1) << pos[node]
            for k in range(nb):
                m = masks[top, k]
                v = XT[f, b0 + k]
                if np.isnan(v):
                    go_left = dl
                else:
                    go_left = v < t
                if go_left:
                    masks[top + 1, k] = m
                    masks[top, k] = m | bit
                else:
                    masks[top + 1, k] = m | bit
                    masks[top, k] = m
            s_node[top] = right[node]
            s_node[top + 1] = left[node]
            top += 2


def _pack_for_shap(ensemble: TreeEnsemble):
    feature, thr, dl, left, right, value, roots = ensemble._pack()
    if ensemble.trees:
        cover = np.concatenate([t.cover for t in ensemble.trees]).astype(np.float64)
        depths = np.array([t.depth() for t in ensemble.trees], np.int64)
    else:
        cover = np.ones(1)
        depths = np.zeros(0, np.int64)
    return feature, thr, dl, left, right, value, cover, roots, depths


def _shap_recursive(ensemble: TreeEnsemble, X, out):
    feature, thr, dl, left, right, value, cover, roots, depths = _pack_for_shap(ensemble)
    _batch_shap(X, feature, thr, dl, left, right, value, cover, roots[: ensemble.n_trees],
                depths, float(ensemble.learning_rate), out)


def _shap_masked(ensemble: TreeEnsemble, X, out, block: int = 4096):
    lr = float(ensemble.learning_rate)
    XT = np.ascontiguousarray(X.T)
    outT = np.zeros(XT.shape)
    prepared = [_prepare_tree(t) for t in ensemble.trees]
    # one buffer for all trees so table pages are faulted in only once
    tables = np.empty(max([p[6] for p in prepared] + [1]))
    for t, (pos, leaf_d, leaf_feat, leaf_z, tab_off, flag_off, n_tab, n_flag) in zip(ensemble.trees, prepared):
        flags = np.zeros(max(n_flag, 1), np.uint8)
        _masked_shap(XT, t.feature.astype(np.int64), t.threshold.astype(np.float64),
                     t.default_left.astype(np.bool_), t.left.astype(np.int64), t.right.astype(np.int64),
                     t.value.astype(np.float64), pos, leaf_d, leaf_feat, leaf_z, tab_off, flag_off,
                     tables, flags, 2 * t.depth() + 2, lr, outT, block)
    out += outT.T


def shap_values(ensemble: TreeEnsemble, X, method: str = "masked") -> ShapExplanation:
    """Exact path-dependent Shapley values for one input or a batch.

    ``method="masked"`` caches per-leaf contributions by the pattern of
    satisfied path conditions and is the fast default; ``"recursive"`` runs the
    classic path-extension recursion per sample.
    """
    single = np.ndim(X) == 1
    X = ensemble.check_input(X)
    out = np.zeros(X.shape)
    if ensemble.n_trees:
        if method == "masked":
            _shap_masked(ensemble, X, out)
        elif method == "recursive":
            _shap_recursive(ensemble, X, out)
        else:
            raise ValueError(f"unknown SHAP method {method!r}")
    base = expected_value(ensemble)
    if single:
        return ShapExplanation(base, out[0], X[0])
    return ShapExplanation(base, out, X)


# --------------------------------------------------------------------------
# aggregate analyses


def group_totals(expl: ShapExplanation, schema: FeatureSchema = FEATURE_SCHEMA) -> dict:
    """Per-sample summed attribution of every feature group."""
    sv = np.atleast_2d(expl.sv)
    return {g: sv[:, idx].sum(axis=1) for g, idx in schema.group_indices().items()}


def group_importance(expl: ShapExplanation, schema: FeatureSchema = FEATURE_SCHEMA) -> dict:
    """mean(|SV|) of every feature group, using the per-sample group total."""
    if np.atleast_2d(expl.sv).shape[0] == 0:
        raise ValueError("no explanations to aggregate")
    return {g: float(np.mean(np.abs(v))) for g, v in group_totals(expl, schema).items()}


def feature_importance(expl: ShapExplanation, schema: FeatureSchema = FEATURE_SCHEMA) -> dict:
    sv = np.atleast_2d(expl.sv)
    return {name: float(np.mean(np.abs(sv[:, i]))) for i, name in enumerate(schema.names)}


def first_sipm_photons(X, side: str = "o", schema: FeatureSchema = FEATURE_SCHEMA) -> np.ndarray:
    """Raw photon count of the SiPM that produced the first timestamp (#OP0)."""
    cols = [schema.index(f"{side}_cnt0_{k}") for k in range(4)]
    return np.asarray(X)[:, cols].sum(axis=1)


def dependence_scan(expl: ShapExplanation, feature: str, color, schema: FeatureSchema = FEATURE_SCHEMA):
    """Rows of (feature value, SV of that feature, colour value).

    ``color`` is either a feature name or an array aligned with the samples.
    """
    X = np.atleast_2d(expl.feature_values)
    sv = np.atleast_2d(expl.sv)
    i = schema.index(feature)
    c = X[:, schema.index(color)] if isinstance(color, str) else np.asarray(color, dtype=float)
    return np.column_stack([X[:, i], sv[:, i], c])


def stratified_rank_correlation(table, n_bins: int = 20, min_count: int = 50) -> float:
    """Count-weighted mean Spearman correlation between SV and colour inside
    quantile bins of the feature value."""
    table = table[np.all(np.isfinite(table), axis=1)]
    if len(table) == 0:
        return float("nan")
    edges = np.unique(np.quantile(table[:, 0], np.linspace(0, 1, n_bins + 1)))
    which = np.clip(np.searchsorted(edges, table[:, 0], side="right") - 1, 0, len(edges) - 2)
    rhos, weights = [], []
    for b in range(len(edges) - 1):
        sel = table[which == b]
        if len(sel) < min_count or np.ptp(sel[:, 2]) == 0 or np.ptp(sel[:, 1]) == 0:
            continue
        rho = stats.spearmanr(sel[:, 2], sel[:, 1]).statistic
        rhos.append(rho)
        weights.append(len(sel))
    if not rhos:
        return float("nan")  # no bin qualified
    return float(np.average(rhos, weights=weights))


def write_importance(path, importance: dict) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "mean_abs_sv_ps"])
        for g, v in importance.items():
            w.writerow([g, repr(float(v))])


def write_dependence(path, table) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature_value", "sv_ps", "color_value"])
        for row in table:
            w.writerow([repr(float(v)) for v in row])
