"""Variance-reduction regression forest, impurity importances and Top-N feature pooling."""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from joblib import Parallel, delayed

from .dataset import kfold_indices
from .metrics import MetricError, adjusted_r2, r2

log = logging.getLogger(__name__)

LEAF = -1


@dataclass(frozen=True)
class ForestConfig:
    n_estimators: int = 500
    max_depth: int | None = 30
    min_samples_split: int = 2
    min_samples_leaf: int = 2
    features_per_split: str | int = "all"  # "all", "third" or an explicit count
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 or None")

    def n_split_features(self, p: int) -> int:
        rule = self.features_per_split
        if rule == "all":
            return p
        if rule == "third":
            return max(1, p // 3)
        return max(1, min(int(rule), p))


@dataclass
class RegressionTree:
    """Flat preorder node arrays; ``feature == -1`` marks a leaf.

    ``impurity`` is the node variance, ``delta`` the variance decrease of the
    split made at that node (0 for leaves).
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    impurity: np.ndarray
    n_samples: np.ndarray
    delta: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_splits(self) -> int:
        return int((self.feature != LEAF).sum())

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            inner = f != LEAF
            if not inner.any():
                return node
            r, nd = rows[inner], node[inner]
            go_left = X[r, f[inner]] <= self.threshold[nd]
            node[inner] = np.where(go_left, self.left[nd], self.right[nd])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def importances(self, n_features: int) -> np.ndarray:
        imp = np.zeros(n_features)
        inner = self.feature != LEAF
        np.add.at(imp, self.feature[inner], self.delta[inner])
        return imp

    def to_rows(self) -> list[list]:
        return [
            [int(f), float(t), int(l), int(r), float(v), float(i), int(n), float(d)]
            for f, t, l, r, v, i, n, d in zip(
                self.feature, self.threshold, self.left, self.right,
                self.value, self.impurity, self.n_samples, self.delta)
        ]

    @classmethod
    def from_rows(cls, rows) -> "RegressionTree":
        cols = list(zip(*rows)) if rows else [()] * 8
        ints = (0, 2, 3, 6)
        arrs = [np.array(c, dtype=np.int64 if k in ints else float) for k, c in enumerate(cols)]
        return cls(*arrs)


def _best_split(Xn: np.ndarray, yn: np.ndarray, feats: np.ndarray, min_leaf: int):
    """Best (delta, feature, threshold) over ``feats`` or ``None``.

    Ties go to the lowest feature index, then the lowest threshold.
    """
    n = yn.shape[0]
    if n < 2 * min_leaf:
        return None
    xs_all = Xn[:, feats]
    order = np.argsort(xs_all, axis=0, kind="stable")
    xs = np.take_along_axis(xs_all, order, axis=0)
    yc = yn - yn.mean()
    ys = yc[order]
    csum = np.cumsum(ys, axis=0)
    csum2 = np.cumsum(ys * ys, axis=0)
    total, total2 = csum[-1], csum2[-1]

    nl = np.arange(1, n, dtype=float)[:, None]
    nr = n - nl
    sl, sl2 = csum[:-1], csum2[:-1]
    sse_l = sl2 - sl * sl / nl
    sse_r = (total2 - sl2) - (total - sl) ** 2 / nr
    var_parent = total2[0] / n
    delta = var_parent - (sse_l + sse_r) / n

    valid = xs[1:] > xs[:-1]
    if min_leaf > 1:
        valid[: min_leaf - 1] = False
        valid[n - min_leaf:] = False
    delta = np.where(valid, delta, -np.inf)
    # feature-major flatten gives the lowest-feature, lowest-threshold tie-break
    flat = np.argmax(delta.T)
    j, i = divmod(int(flat), n - 1)
    best = delta[i, j]
    if not np.isfinite(best) or best <= 0.0:
        return None
    thr = 0.5 * (xs[i, j] + xs[i + 1, j])
    return float(best), int(feats[j]), float(thr)


def build_tree(X: np.ndarray, y: np.ndarray, cfg: ForestConfig,
               rng: np.random.Generator) -> RegressionTree:
    p = X.shape[1]
    m = cfg.n_split_features(p)
    max_depth = np.inf if cfg.max_depth is None else cfg.max_depth
    nodes: list[list] = []

    def grow(idx: np.ndarray, depth: int) -> int:
        yn = y[idx]
        me = len(nodes)
        var = float(np.mean((yn - yn.mean()) ** 2))
        nodes.append([LEAF, 0.0, LEAF, LEAF, float(yn.mean()), var, len(idx), 0.0])
        if depth >= max_depth or len(idx) < cfg.min_samples_split or var <= 0.0:
            return me
        feats = np.arange(p) if m == p else np.sort(rng.choice(p, m, replace=False))
        split = _best_split(X[idx], yn, feats, cfg.min_samples_leaf)
        if split is None:
            return me
        delta, f, thr = split
        go_left = X[idx, f] <= thr
        nodes[me][0], nodes[me][1], nodes[me][7] = f, thr, delta
        nodes[me][2] = grow(idx[go_left], depth + 1)
        nodes[me][3] = grow(idx[~go_left], depth + 1)
        return me

    grow(np.arange(X.shape[0]), 0)
    return RegressionTree.from_rows(nodes)


def _tree_seed(seed: int, tree_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tree_index]))


def _fit_one(X, y, cfg: ForestConfig, t: int) -> RegressionTree:
    rng = _tree_seed(cfg.seed, t)
    if cfg.bootstrap:
        idx = rng.integers(0, X.shape[0], X.shape[0])
        return build_tree(X[idx], y[idx], cfg, rng)
    return build_tree(X, y, cfg, rng)


@dataclass
class RandomForest:
    config: ForestConfig
    trees: list[RegressionTree]
    n_features: int
    constant_target: bool = False

    def predict(self, X) -> np.ndarray:
        return predict(self, X)


@dataclass
class ImportanceReport:
    importances: np.ndarray
    ranking: np.ndarray
    no_splits: bool = False
    labels: list[str] | None = None
    first_order_ranking: np.ndarray | None = None
    higher_order_ranking: np.ndarray | None = None

    def to_csv(self) -> str:
        lines = ["rank,feature_index,feature_label,importance"]
        for r, j in enumerate(self.ranking, start=1):
            label = self.labels[j] if self.labels else str(j)
            lines.append(f"{r},{j},{label},{float(self.importances[j])!r}")
        return "\n".join(lines) + "\n"


def _dense(X) -> np.ndarray:
    if hasattr(X, "toarray"):
        X = X.toarray()
    return np.asarray(X, dtype=float)


def fit_forest(X, y, cfg: ForestConfig = ForestConfig(), n_jobs: int = 1) -> RandomForest:
    """Fit ``cfg.n_estimators`` trees; each tree's RNG depends only on (seed, tree index)."""
    X = _dense(X)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("empty feature matrix")
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 rows to fit a forest")
    constant = bool(np.all(y == y[0]))
    if constant:
        log.warning("constant target: every tree will be a single leaf")
    if n_jobs == 1:
        trees = [_fit_one(X, y, cfg, t) for t in range(cfg.n_estimators)]
    else:
        trees = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(_fit_one)(X, y, cfg, t) for t in range(cfg.n_estimators)
        )
    return RandomForest(cfg, list(trees), X.shape[1], constant)


def predict(forest: RandomForest, X) -> np.ndarray:
    X = _dense(X)
    if X.ndim != 2 or X.shape[1] != forest.n_features:
        raise ValueError(f"expected {forest.n_features} columns, got {X.shape}")
    out = np.zeros(X.shape[0])
    for tree in forest.trees:
        out += tree.predict(X)
    return out / len(forest.trees)


def feature_importances(forest: RandomForest, labels: Sequence[str] | None = None,
                        first_order: Sequence[int] | None = None) -> ImportanceReport:
    """Per-tree summed variance decrease per feature, averaged over trees, normalized to 1.

    ``first_order`` (column indices) splits the ranking into first-order and
    higher-order blocks.
    """
    total = np.zeros(forest.n_features)
    for tree in forest.trees:
        total += tree.importances(forest.n_features)
    total /= len(forest.trees)
    s = total.sum()
    no_splits = s <= 0
    imp = np.zeros_like(total) if no_splits else total / s
    ranking = np.argsort(-imp, kind="stable")
    rep = ImportanceReport(imp, ranking, no_splits, list(labels) if labels is not None else None)
    if first_order is not None:
        fo = set(int(j) for j in first_order)
        rep.first_order_ranking = np.array([j for j in ranking if j in fo], dtype=int)
        rep.higher_order_ranking = np.array([j for j in ranking if j not in fo], dtype=int)
    return rep


DEFAULT_GRID = {
    "n_estimators": [100, 300, 500],
    "max_depth": [10, 20, 30, None],
    "min_samples_split": [2, 5],
    "min_samples_leaf": [1, 2],
}


@dataclass
class GridSearchResult:
    best: ForestConfig
    table: list[dict]

    def to_csv(self) -> str:
        keys = list(self.table[0]) if self.table else []
        lines = [",".join(keys)]
        lines += [",".join(str(row[k]) for k in keys) for row in self.table]
        return "\n".join(lines) + "\n"


def grid_search(X, y, param_grid: dict | None = None, folds: int = 5, seed: int = 0,
                base: ForestConfig | None = None, n_jobs: int = 1) -> GridSearchResult:
    """Exhaustive k-fold CV over ``param_grid``; highest mean R^2 wins, first in grid order on ties."""
    X = _dense(X)
    y = np.asarray(y, dtype=float).ravel()
    grid = DEFAULT_GRID if param_grid is None else param_grid
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("parameter grid is empty")
    if folds > X.shape[0]:
        raise ValueError(f"{folds} folds requested for {X.shape[0]} samples")
    base = base or ForestConfig(seed=seed)
    splits = kfold_indices(X.shape[0], folds, seed)
    keys = list(grid)
    table = []
    best, best_score = None, -np.inf
    for values in itertools.product(*(grid[k] for k in keys)):
        cfg = replace(base, **dict(zip(keys, values)))
        scores = []
        for val in splits:
            train = np.setdiff1d(np.arange(X.shape[0]), val)
            model = fit_forest(X[train], y[train], cfg, n_jobs=n_jobs)
            try:
                scores.append(r2(y[val], predict(model, X[val])))
            except MetricError:
                scores.append(np.nan)
        score = float(np.nanmean(scores)) if not np.all(np.isnan(scores)) else -np.inf
        table.append({**dict(zip(keys, values)), "mean_cv_r2": score})
        if score > best_score:
            best, best_score = cfg, score
    return GridSearchResult(best or replace(base, **dict(zip(keys, [grid[k][0] for k in keys]))), table)


# -- Top-N pooling ----------------------------------------------------------

Trainer = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class SelectionResult:
    mode: str
    best_m: int
    best_n: int
    selected_columns: list[int]
    selected_labels: list[str]
    trace: list[dict] = field(default_factory=list)

    @property
    def n_selected(self) -> int:
        return len(self.selected_columns)

    def trace_csv(self) -> str:
        lines = ["m,n,k,r2,adjusted_r2"]
        for t in self.trace:
            lines.append(f"{t['m']},{t['n']},{t['k']},{t['r2']!r},{t['adjusted_r2']!r}")
        return "\n".join(lines) + "\n"


def _sizes(total: int, start: int, step: int) -> list[int]:
    """``start, start + step, ...`` capped at ``total``, which is always included."""
    if start > total:
        log.warning("grid start %d exceeds block size %d; using the whole block", start, total)
    sizes = list(range(start, total + 1, step))
    if not sizes or sizes[-1] != total:
        sizes.append(total)
    return sizes


def cv_scores(X, y, trainer: Trainer, folds: int = 6, seed: int = 0) -> tuple[float, float]:
    """Pooled out-of-fold R^2 and adjusted R^2 (n = all rows, k = columns of X)."""
    n, k = X.shape
    oof = np.empty(n)
    for val in kfold_indices(n, folds, seed):
        train = np.setdiff1d(np.arange(n), val)
        oof[val] = np.asarray(trainer(X[train], y[train], X[val]), dtype=float).ravel()
    r = r2(y, oof)
    try:
        adj = adjusted_r2(r, n, k)
    except MetricError:
        adj = float("nan")
    return r, adj


def topn_select(X1, X2, y, trainer: Trainer, start: int = 20, step: int = 20,
                mode: str = "joint", labels1: Sequence[str] | None = None,
                labels2: Sequence[str] | None = None, importances=None,
                retain_all_first: bool = False, folds: int = 6, seed: int = 0) -> SelectionResult:
    """Grow ranked feature subsets and keep the one maximizing CV adjusted R^2.

    ``X1`` / ``X2`` hold the first- and higher-order blocks with columns
    already sorted by descending importance. ``joint`` sweeps the (M, N) grid
    of block prefixes; ``merged`` sweeps prefixes of one list that interleaves
    both blocks by ``importances`` (concatenated block importances, required).
    Returned ``selected_columns`` index the concatenation ``[X1 | X2]``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    X1, X2 = _dense(X1), _dense(X2)
    y = np.asarray(y, dtype=float).ravel()
    p1, p2 = X1.shape[1], X2.shape[1]
    labels = list(labels1 or [f"f1_{j}" for j in range(p1)]) + \
        list(labels2 or [f"f2_{j}" for j in range(p2)])
    X = np.hstack([X1, X2])
    trace = []

    if mode == "merged":
        if start > p1 + p2:
            log.warning("start=%d exceeds the %d available features; using all", start, p1 + p2)
        if importances is None:
            raise ValueError("merged mode needs the concatenated importances")
        imp = np.asarray(importances, dtype=float)
        order = np.argsort(-imp, kind="stable")
        for k in _sizes(p1 + p2, start, step):
            cols = order[:k]
            r, adj = cv_scores(X[:, cols], y, trainer, folds, seed)
            m = int((cols < p1).sum())
            trace.append({"m": m, "n": k - m, "k": k, "r2": r, "adjusted_r2": adj,
                          "cols": [int(c) for c in cols]})
    elif mode == "joint":
        if retain_all_first:
            m_grid = [p1]
        else:
            m_grid = _sizes(p1, start, step)
        n_grid = _sizes(p2, start, step) if p2 else [0]
        for m in m_grid:
            for n_ in n_grid:
                cols = list(range(m)) + list(range(p1, p1 + n_))
                r, adj = cv_scores(X[:, cols], y, trainer, folds, seed)
                trace.append({"m": m, "n": n_, "k": m + n_, "r2": r, "adjusted_r2": adj,
                              "cols": cols})
    else:
        raise ValueError(f"mode must be 'joint' or 'merged', got {mode!r}")

    scores = np.array([t["adjusted_r2"] for t in trace])
    if np.all(np.isnan(scores)):
        raise MetricError("adjusted R^2 undefined at every grid point (too few samples)")
    best = trace[int(np.nanargmax(scores))]
    cols = best["cols"]
    return SelectionResult(mode, best["m"], best["n"], cols, [labels[c] for c in cols],
                           [{k: v for k, v in t.items() if k != "cols"} for t in trace])


def forest_to_payload(forest: RandomForest) -> dict:
    return {
        "config": asdict(forest.config),
        "n_features": forest.n_features,
        "constant_target": forest.constant_target,
        "trees": [t.to_rows() for t in forest.trees],
    }


def forest_from_payload(payload: dict) -> RandomForest:
    cfg = ForestConfig(**payload["config"])
    trees = [RegressionTree.from_rows(rows) for rows in payload["trees"]]
    return RandomForest(cfg, trees, payload["n_features"], payload.get("constant_target", False))
