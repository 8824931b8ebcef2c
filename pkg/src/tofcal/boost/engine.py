"""Gradient tree boosting for squared-error regression.

The ensemble predicts ``base_score + sum_k lr * f_k(x)`` where every ``f_k`` is
a binary CART tree grown on the current residuals. Candidate thresholds come
from per-feature histograms; NaN inputs follow a learned default branch.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import SchemaError
from . import _kernels as K

log = logging.getLogger(__name__)

DEPTH_GRID = (12, 15, 18, 20)
LR_GRID = (0.1, 0.3, 0.5)


@dataclass(frozen=True)
class HyperParams:
    max_depth: int = 18
    learning_rate: float = 0.1
    n_max: int = 500
    early_stopping_rounds: int = 10
    min_samples_leaf: int = 20
    histogram_bins: int = 256
    reg_lambda: float = 0.0
    min_split_gain: float = 0.0
    exact: bool = False

    def __post_init__(self):
        if self.max_depth < 0 or self.n_max < 0:
            raise ValueError("max_depth and n_max must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if not 2 <= self.histogram_bins <= 65535:
            raise ValueError("histogram_bins must lie in [2, 65535]")


def default_grid(**overrides) -> list:
    return [HyperParams(max_depth=d, learning_rate=lr, **overrides) for d in DEPTH_GRID for lr in LR_GRID]


@dataclass
class Tree:
    """Flat node arrays of one regression tree; node 0 is the root."""

    feature: np.ndarray  # int32, -1 for leaves
    threshold: np.ndarray  # float64, go left iff x < threshold
    default_left: np.ndarray  # bool, branch taken by NaN
    left: np.ndarray  # int32
    right: np.ndarray  # int32
    value: np.ndarray  # float64, leaf output (before shrinkage)
    cover: np.ndarray  # float64, training samples reaching the node

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    def depth(self) -> int:
        d = np.zeros(self.n_nodes, np.int64)
        for node in range(self.n_nodes):
            if self.feature[node] >= 0:
                d[self.left[node]] = d[node] + 1
                d[self.right[node]] = d[node] + 1
        return int(d.max())

    def apply(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        return np.array([K.traverse(x, self.feature, self.threshold, self.default_left,
                                    self.left, self.right, 0) for x in X], dtype=np.int64)

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    @classmethod
    def leaf(cls, value: float, cover: float = 1.0) -> "Tree":
        return cls(np.array([-1], np.int32), np.zeros(1), np.zeros(1, bool),
                   np.array([-1], np.int32), np.array([-1], np.int32),
                   np.array([value], float), np.array([cover], float))


@dataclass
class TreeEnsemble:
    base_score: float
    trees: list
    learning_rate: float
    max_depth: int
    n_features: int
    feature_names: Optional[tuple] = None
    schema_hash: Optional[str] = None
    _packed: Optional[tuple] = field(default=None, repr=False, compare=False)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def _pack(self):
        if self._packed is None:
            offs = np.cumsum([0] + [t.n_nodes for t in self.trees])
            if self.trees:
                cat = lambda name: np.concatenate([getattr(t, name) for t in self.trees])
                feature = cat("feature").astype(np.int32)
                left = np.concatenate([np.where(t.left >= 0, t.left + o, -1) for t, o in zip(self.trees, offs)])
                right = np.concatenate([np.where(t.right >= 0, t.right + o, -1) for t, o in zip(self.trees, offs)])
                packed = (feature, cat("threshold").astype(np.float64), cat("default_left").astype(np.bool_),
                          left.astype(np.int32), right.astype(np.int32), cat("value").astype(np.float64))
            else:
                packed = (np.full(1, -1, np.int32), np.zeros(1), np.zeros(1, np.bool_),
                          np.full(1, -1, np.int32), np.full(1, -1, np.int32), np.zeros(1))
            self._packed = packed + (offs[:-1].astype(np.int64),)
        return self._packed

    def check_input(self, X) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        if X.shape[1] != self.n_features:
            raise SchemaError(f"model expects {self.n_features} features, got {X.shape[1]}")
        return X

    def predict(self, X) -> np.ndarray:
        X = self.check_input(X)
        feature, thr, dl, left, right, value, roots = self._pack()
        out = np.empty(X.shape[0])
        K.predict_ensemble(X, feature, thr, dl, left, right, value, roots, self.n_trees,
                           float(self.learning_rate), float(self.base_score), out)
        return out

    def truncate(self, n_trees: int) -> "TreeEnsemble":
        return TreeEnsemble(self.base_score, list(self.trees[:n_trees]), self.learning_rate,
                            self.max_depth, self.n_features, self.feature_names, self.schema_hash)


@dataclass
class TrainLog:
    train_loss: list = field(default_factory=list)  # MSE after each tree, index 0 = base only
    val_loss: list = field(default_factory=list)
    best_iteration: int = 0  # number of trees kept
    stopped_early: bool = False
    seconds: float = 0.0
    notes: list = field(default_factory=list)


class BinMapper:
    """Per-feature histogram edges; bin ``k`` holds ``edges[k-1] <= x < edges[k]``."""

    def __init__(self, max_bins: int = 256, exact: bool = False):
        self.max_bins = max_bins
        self.exact = exact

    def fit(self, X):
        n_feat = X.shape[1]
        edges = []
        # value bins = max_bins - 1, the last bin is reserved for NaN
        n_value_bins = self.max_bins - 1
        for f in range(n_feat):
            col = X[:, f]
            col = col[~np.isnan(col)]
            u = np.unique(col)
            if self.exact or len(u) <= n_value_bins:
                if len(u) > 65534:
                    raise ValueError(f"feature {f}: too many distinct values for exact mode")
                edges.append(u[:-1] + (u[1:] - u[:-1]) / 2.0)
            else:
                q = np.quantile(col, np.linspace(0.0, 1.0, n_value_bins + 1)[1:-1])
                edges.append(np.unique(q))
        width = max([len(e) for e in edges] + [1])
        self.n_edges = np.array([len(e) for e in edges], np.int64)
        self.edges = np.full((n_feat, width), np.inf)
        for f, e in enumerate(edges):
            self.edges[f, : len(e)] = e
        self.n_vbins = (self.n_edges + 1).astype(np.int64)
        self.total_bins = int(self.n_vbins.max()) + 1
        return self

    def transform(self, X) -> np.ndarray:
        out = np.empty(X.shape, np.uint16)
        K.bin_matrix(np.ascontiguousarray(X, dtype=np.float64), self.edges, self.n_edges, out)
        return out

    def threshold(self, f: int, b: int) -> float:
        return float(self.edges[f, b])


def train(X, y, X_val=None, y_val=None, hp: HyperParams = HyperParams(),
          feature_names: Optional[Sequence[str]] = None, schema_hash: Optional[str] = None):
    """Fit an ensemble; returns ``(TreeEnsemble, TrainLog)``.

    With a non-empty validation set training stops once the validation MSE has
    not improved for ``hp.early_stopping_rounds`` trees, and the ensemble is
    truncated at the best iteration.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("training set is empty")
    if len(y) != len(X):
        raise ValueError("X and y lengths differ")
    if not np.all(np.isfinite(y)):
        raise ValueError("labels must be finite")
    n, n_feat = X.shape
    tlog = TrainLog()
    use_val = X_val is not None and len(X_val) > 0
    if not use_val:
        warnings.warn("validation set empty: early stopping disabled")
        tlog.notes.append("early stopping disabled (no validation data)")
    if hp.reg_lambda == 0.0:
        tlog.notes.append("leaf damping (lambda) off")
    t0 = time.perf_counter()

    mapper = BinMapper(hp.histogram_bins, hp.exact).fit(X)
    bins = mapper.transform(X)
    base = float(np.mean(y))
    pred = np.full(n, base)
    if use_val:
        X_val = np.ascontiguousarray(X_val, dtype=np.float64)
        y_val = np.asarray(y_val, dtype=np.float64)
        if X_val.shape[1] != n_feat:
            raise SchemaError("validation feature count differs from training")
        pred_val = np.full(len(X_val), base)
        tlog.val_loss.append(float(np.mean((pred_val - y_val) ** 2)))
    tlog.train_loss.append(float(np.mean((pred - y) ** 2)))

    trees = []
    idx = np.empty(n, np.int64)
    buf = np.empty(n, np.int64)
    best_loss = tlog.val_loss[0] if use_val else np.inf
    best_k = 0
    lr = float(hp.learning_rate)
    for k in range(1, hp.n_max + 1):
        grad = pred - y
        (feat, tbin, dleft, left, right, value, cover, gain, nstart, nend) = K.grow_tree(
            bins, grad, mapper.n_vbins, hp.max_depth, hp.min_samples_leaf, hp.reg_lambda,
            hp.min_split_gain, mapper.total_bins, idx, buf)
        thr = np.where(feat >= 0, mapper.edges[np.maximum(feat, 0), tbin], 0.0)
        tree = Tree(feat.copy(), thr.astype(np.float64), dleft.copy(), left.copy(), right.copy(),
                    value.copy(), cover.copy())
        trees.append(tree)
        K.apply_leaves(pred, idx, feat, value, nstart, nend, lr)
        tlog.train_loss.append(float(np.mean((pred - y) ** 2)))
        if use_val:
            K.predict_add(X_val, tree.feature, tree.threshold, tree.default_left, tree.left,
                          tree.right, tree.value, 0, lr, pred_val)
            loss = float(np.mean((pred_val - y_val) ** 2))
            tlog.val_loss.append(loss)
            if loss < best_loss:
                best_loss, best_k = loss, k
            elif k - best_k >= hp.early_stopping_rounds:
                tlog.stopped_early = True
                break
        else:
            best_k = k
    tlog.best_iteration = best_k
    tlog.seconds = time.perf_counter() - t0
    ens = TreeEnsemble(base, trees[:best_k], lr, hp.max_depth, n_feat,
                       tuple(feature_names) if feature_names is not None else None, schema_hash)
    log.info("trained d=%d lr=%.2f: %d trees kept of %d (%.1fs)", hp.max_depth, lr, best_k,
             len(trees), tlog.seconds)
    return ens, tlog


def predict(ensemble: TreeEnsemble, X) -> np.ndarray:
    return ensemble.predict(X)


@dataclass
class GridEntry:
    params: HyperParams
    model: TreeEnsemble
    log: TrainLog
    val_loss: float

    @property
    def key(self):
        return (self.params.max_depth, self.params.learning_rate)


def grid_search(X, y, X_val, y_val, grid=None, feature_names=None, schema_hash=None):
    """Train every configuration; returns ``(entries, best_entry)``.

    Selection by minimum validation MSE, ties broken by smaller depth then
    smaller learning rate.
    """
    if X_val is None or len(X_val) == 0 or len(X) == 0:
        raise ValueError("grid search needs non-empty training and validation sets")
    grid = list(grid) if grid is not None else default_grid()
    entries = []
    for hp in grid:
        model, tlog = train(X, y, X_val, y_val, hp, feature_names, schema_hash)
        entries.append(GridEntry(hp, model, tlog, tlog.val_loss[tlog.best_iteration]))
    best = select_best(entries)
    return entries, best


def select_best(entries):
    return min(entries, key=lambda e: (e.val_loss, e.params.max_depth, e.params.learning_rate))
