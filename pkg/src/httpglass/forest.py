"""Random forest with class scores, Gini importances, and categorical splits.

Written against the needs of the inference pipeline rather than pulled from a
library: splits must be reproducible bit-for-bit given a seed, ties must break
deterministically (lowest feature index, then lowest threshold / smallest
category prefix), and integer-coded categorical features are split by subset
membership instead of one-hot encoding.

Split quality maximizes sum(left_counts^2)/n_left + sum(right_counts^2)/n_right,
which orders splits identically to minimizing weighted Gini impurity while
staying exact for integer class counts.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import ceil, sqrt

import numpy as np

FORMAT_VERSION = 1


class ForestError(Exception):
    pass


@dataclass(frozen=True)
class TrainParams:
    n_trees: int = 100
    max_depth: int | None = None
    min_leaf: int = 1
    features_per_split: int | None = None  # default ceil(sqrt(d))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ForestError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise ForestError("min_leaf must be >= 1")

    def resolved_mtry(self, d: int) -> int:
        m = self.features_per_split if self.features_per_split is not None \
            else ceil(sqrt(d))
        if m < 1:
            raise ForestError(f"features_per_split {m} must be >= 1")
        return min(m, d)


@dataclass
class Node:
    feature: int = -1            # -1 for leaves
    threshold: float | None = None
    cats_left: list[int] | None = None  # categorical splits: codes going left
    left: int = -1
    right: int = -1
    counts: list[int] | None = None     # leaves: per-class sample counts

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0


@dataclass
class Tree:
    nodes: list[Node] = field(default_factory=list)


@dataclass
class Forest:
    trees: list[Tree]
    classes: list
    schema_id: str
    n_features: int
    categorical: frozenset[int]
    params: TrainParams
    importance_raw: np.ndarray  # unnormalized Gini importance accumulator

    @property
    def n_classes(self) -> int:
        return len(self.classes)


def _gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - (p ** 2).sum())


def _numeric_candidates(col, Y, min_leaf):
    """Best threshold for one numeric column.

    Returns (score, threshold) or None.  Thresholds are midpoints between
    consecutive distinct values, scanned in ascending order.
    """
    order = np.argsort(col)
    sv = col[order]
    cum = Y[order].cumsum(axis=0)
    n = len(sv)
    boundaries = np.nonzero(sv[:-1] != sv[1:])[0]
    if boundaries.size == 0:
        return None
    nl = boundaries + 1
    nr = n - nl
    ok = (nl >= min_leaf) & (nr >= min_leaf)
    boundaries = boundaries[ok]
    if boundaries.size == 0:
        return None
    nl = nl[ok]
    nr = nr[ok]
    total = cum[-1]
    left = cum[boundaries]
    right = total[None, :] - left
    score = (left ** 2).sum(axis=1) / nl + (right ** 2).sum(axis=1) / nr
    best = int(np.argmax(score))  # first max -> lowest threshold on ties
    b = boundaries[best]
    threshold = (sv[b] + sv[b + 1]) / 2.0
    return float(score[best]), threshold


def _categorical_candidates(col, Y, yv, min_leaf, node_counts):
    """Best code-subset split for one categorical column.

    Codes are ordered by the proportion of the reference class (class 1 for
    binary problems, otherwise the node's majority class), ties by ascending
    code, then prefix splits are scanned like an ordered feature.
    Returns (score, left_codes) or None.
    """
    codes, inv = np.unique(col, return_inverse=True)
    if codes.size < 2:
        return None
    K = Y.shape[1]
    cnt = np.zeros((codes.size, K), dtype=np.int64)
    np.add.at(cnt, (inv, yv), 1)
    ref = 1 if K == 2 else int(np.argmax(node_counts))
    prop = cnt[:, ref] / cnt.sum(axis=1)
    order = np.lexsort((codes, prop))
    ordered_cnt = cnt[order]
    prefix = ordered_cnt.cumsum(axis=0)
    total = prefix[-1]
    n = int(total.sum())
    cuts = np.arange(codes.size - 1)
    nl = prefix[cuts].sum(axis=1)
    nr = n - nl
    ok = (nl >= min_leaf) & (nr >= min_leaf)
    cuts = cuts[ok]
    if cuts.size == 0:
        return None
    left = prefix[cuts]
    right = total[None, :] - left
    score = (left ** 2).sum(axis=1) / nl[ok] + (right ** 2).sum(axis=1) / nr[ok]
    best = int(np.argmax(score))  # first max -> smallest prefix on ties
    j = int(cuts[best])
    left_codes = sorted(float(codes[k]) for k in order[:j + 1])
    return float(score[best]), left_codes


def _build_tree(X, yv, K, params, categorical, rng, importance, n_total):
    d = X.shape[1]
    mtry = params.resolved_mtry(d)
    nodes: list[Node] = []
    if params.bootstrap:
        root_idx = np.sort(rng.integers(0, X.shape[0], X.shape[0]))
    else:
        root_idx = np.arange(X.shape[0])
    stack = [(root_idx, 0, None, False)]  # (sample idx, depth, parent, is_right)
    while stack:
        idx, depth, parent, is_right = stack.pop()
        node_id = len(nodes)
        if parent is not None:
            if is_right:
                nodes[parent].right = node_id
            else:
                nodes[parent].left = node_id
        counts = np.bincount(yv[idx], minlength=K)
        node = Node(counts=[int(c) for c in counts])
        nodes.append(node)
        n = idx.size
        if n < 2 * params.min_leaf or (counts > 0).sum() < 2 or \
                (params.max_depth is not None and depth >= params.max_depth):
            continue
        base = float((counts.astype(np.float64) ** 2).sum()) / n
        cand = np.sort(rng.choice(d, size=mtry, replace=False))
        Y = np.zeros((n, K), dtype=np.int64)
        Y[np.arange(n), yv[idx]] = 1
        best_score = base
        best = None
        for f in cand:
            col = X[idx, f]
            if f in categorical:
                res = _categorical_candidates(col, Y, yv[idx], params.min_leaf,
                                              counts)
                if res is not None and res[0] > best_score:
                    best_score, best = res[0], (int(f), None, res[1])
            else:
                res = _numeric_candidates(col, Y, params.min_leaf)
                if res is not None and res[0] > best_score:
                    best_score, best = res[0], (int(f), res[1], None)
        if best is None:
            continue
        f, threshold, cats_left = best
        col = X[idx, f]
        if cats_left is not None:
            mask = np.isin(col, cats_left)
        else:
            mask = col <= threshold
        left_idx = idx[mask]
        right_idx = idx[~mask]
        cl = np.bincount(yv[left_idx], minlength=K)
        cr = np.bincount(yv[right_idx], minlength=K)
        decrease = (n / n_total) * _gini(counts) \
            - (left_idx.size / n_total) * _gini(cl) \
            - (right_idx.size / n_total) * _gini(cr)
        importance[f] += decrease
        node.feature = f
        node.threshold = threshold
        node.cats_left = cats_left
        node.counts = None
        # push right first so the left child is materialized next (stable ids)
        stack.append((right_idx, depth + 1, node_id, True))
        stack.append((left_idx, depth + 1, node_id, False))
    return Tree(nodes=nodes)


def train(X, y, params: TrainParams | None = None,
          categorical: frozenset[int] | set[int] = frozenset(),
          schema_id: str = "unspecified") -> Forest:
    """Train a forest on (X, y); y may hold arbitrary sortable labels."""
    params = params or TrainParams()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ForestError("X must be 2-dimensional")
    if len(y) != X.shape[0]:
        raise ForestError("X and y length mismatch")
    if X.shape[0] < 1:
        raise ForestError("need at least one sample")
    classes = sorted(set(y))
    class_index = {c: k for k, c in enumerate(classes)}
    yv = np.asarray([class_index[v] for v in y], dtype=np.int64)
    K = len(classes)
    categorical = frozenset(int(i) for i in categorical)
    for i in categorical:
        if not 0 <= i < X.shape[1]:
            raise ForestError(f"categorical index {i} out of range")
    importance = np.zeros(X.shape[1], dtype=np.float64)
    seeds = np.random.SeedSequence(params.seed).spawn(params.n_trees)
    trees = []
    for ss in seeds:
        rng = np.random.default_rng(ss)
        trees.append(_build_tree(X, yv, K, params, categorical, rng,
                                 importance, X.shape[0]))
    return Forest(trees=trees, classes=classes, schema_id=schema_id,
                  n_features=X.shape[1], categorical=categorical,
                  params=params, importance_raw=importance)


def _tree_scores(tree: Tree, X: np.ndarray, K: int) -> np.ndarray:
    out = np.zeros((X.shape[0], K), dtype=np.float64)
    stack = [(0, np.arange(X.shape[0]))]
    while stack:
        node_id, idx = stack.pop()
        if idx.size == 0:
            continue
        node = tree.nodes[node_id]
        if node.is_leaf:
            counts = np.asarray(node.counts, dtype=np.float64)
            out[idx] = counts / counts.sum()
            continue
        col = X[idx, node.feature]
        if node.cats_left is not None:
            mask = np.isin(col, node.cats_left)
        else:
            mask = col <= node.threshold
        stack.append((node.left, idx[mask]))
        stack.append((node.right, idx[~mask]))
    return out


def predict_scores(forest: Forest, X) -> np.ndarray:
    """Mean of per-tree leaf class frequencies; rows sum to 1."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != forest.n_features:
        raise ForestError(
            f"schema mismatch: expected {forest.n_features} features, "
            f"got {X.shape[1]}")
    total = np.zeros((X.shape[0], forest.n_classes), dtype=np.float64)
    for tree in forest.trees:
        total += _tree_scores(tree, X, forest.n_classes)
    return total / len(forest.trees)


def predict(forest: Forest, x):
    """(label, scores) for one vector; argmax ties go to the lowest class index."""
    scores = predict_scores(forest, x)[0]
    return forest.classes[int(np.argmax(scores))], scores


def predict_labels(forest: Forest, X) -> list:
    scores = predict_scores(forest, X)
    return [forest.classes[int(k)] for k in np.argmax(scores, axis=1)]


def gini_importance(forest: Forest) -> np.ndarray:
    """Per-feature mean impurity decrease, normalized to sum 1.

    A forest with no splits at all yields uniform zeros (flagged via
    ``forest_has_splits``).
    """
    total = forest.importance_raw.sum()
    if total <= 0:
        return np.zeros_like(forest.importance_raw)
    return forest.importance_raw / total


def forest_has_splits(forest: Forest) -> bool:
    return bool(forest.importance_raw.sum() > 0)


def to_dict(forest: Forest) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "schema_id": forest.schema_id,
        "n_features": forest.n_features,
        "classes": list(forest.classes),
        "categorical": sorted(forest.categorical),
        "params": {
            "n_trees": forest.params.n_trees,
            "max_depth": forest.params.max_depth,
            "min_leaf": forest.params.min_leaf,
            "features_per_split": forest.params.features_per_split,
            "bootstrap": forest.params.bootstrap,
            "seed": forest.params.seed,
        },
        "importance_raw": [float(v) for v in forest.importance_raw],
        "trees": [
            [[n.feature, n.threshold, n.cats_left, n.left, n.right, n.counts]
             for n in tree.nodes]
            for tree in forest.trees
        ],
    }


def from_dict(data: dict) -> Forest:
    if data.get("format_version") != FORMAT_VERSION:
        raise ForestError("unsupported model format version")
    trees = [
        Tree(nodes=[Node(feature=f, threshold=t, cats_left=c, left=l, right=r,
                         counts=cnt)
                    for f, t, c, l, r, cnt in nodes])
        for nodes in data["trees"]
    ]
    p = data["params"]
    return Forest(
        trees=trees, classes=data["classes"], schema_id=data["schema_id"],
        n_features=data["n_features"],
        categorical=frozenset(data["categorical"]),
        params=TrainParams(**p),
        importance_raw=np.asarray(data["importance_raw"], dtype=np.float64),
    )


def save(forest: Forest, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(to_dict(forest), fh, sort_keys=True)


def load(path: str) -> Forest:
    with open(path) as fh:
        return from_dict(json.load(fh))
