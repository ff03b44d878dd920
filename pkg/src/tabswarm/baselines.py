"""From-scratch tree baselines for the same binary task.

CART decision tree (Gini impurity), bagged random forest with feature
subsampling, and gradient-boosted regression trees with logistic loss
and Newton leaf steps. Rows route left when feature value <= threshold;
thresholds sit at midpoints between consecutive distinct sorted values.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np


class SingleClass(ValueError):
    def __init__(self):
        super().__init__("boosting requires both classes in the training data")


@dataclass
class TreeNode:
    """Internal node (feature/threshold/children) or leaf.

    Classification leaves carry class counts and the probability of
    class 1; regression leaves carry a real value.
    """

    feature: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    counts: np.ndarray | None = None
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


@dataclass
class ForestModel:
    trees: list[TreeNode]
    m_try: int
    seed: int
    bootstrap: bool = True


@dataclass
class BoostedModel:
    initial_score: float      # log-odds of class 1 on the training data
    trees: list[TreeNode]
    learning_rate: float


def gini(counts) -> float:
    """Gini impurity of a class-count vector: 0.5 for a 50/50 node, 0 when pure."""
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return float(1.0 - (p * p).sum())


def _candidate_features(n_features, m_try, rng):
    if m_try is None or m_try >= n_features:
        return range(n_features)
    if rng is None:
        raise ValueError("feature subsampling (m_try) needs an rng")
    # evaluated in ascending order so the lowest-feature tie-break holds
    return np.sort(rng.choice(n_features, size=m_try, replace=False))


def _best_split_gini(x, y, min_leaf, features):
    """Best (gain, feature, threshold) by Gini decrease, or None.

    Ties keep the earliest candidate in (feature asc, threshold asc)
    order. Gini decrease is mathematically >= 0 for every partition, and
    zero-gain candidates stay eligible: plateaus like XOR still split and
    resolve at the next depth.
    """
    n = len(y)
    parent_counts = np.bincount(y, minlength=2).astype(np.float64)
    parent_gini = gini(parent_counts)
    best = None
    for f in features:
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        ys = y[order]
        distinct = np.nonzero(xs[:-1] < xs[1:])[0]  # split after position i
        if len(distinct) == 0:
            continue
        cum_ones = np.cumsum(ys)
        for i in distinct:
            n_left = i + 1
            n_right = n - n_left
            if n_left < min_leaf or n_right < min_leaf:
                continue
            ones_left = cum_ones[i]
            left = np.array([n_left - ones_left, ones_left], dtype=np.float64)
            right = parent_counts - left
            weighted = (n_left * gini(left) + n_right * gini(right)) / n
            gain = parent_gini - weighted
            if best is None or gain > best[0]:
                threshold = (xs[i] + xs[i + 1]) / 2.0
                best = (gain, int(f), float(threshold))
    return best


def fit_tree(x, y, max_depth, min_leaf=1, rng=None, m_try=None) -> TreeNode:
    """Greedy CART classification tree.

    `rng` and `m_try` enable per-split feature subsampling for forests;
    split selection itself is deterministic (lowest feature index, lowest
    threshold on equal gain).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)

    def build(idx, depth):
        counts = np.bincount(y[idx], minlength=2).astype(np.float64)
        node = TreeNode(counts=counts, value=float(counts[1] / counts.sum()))
        if depth >= max_depth or counts.min() == 0.0 or len(idx) < 2 * min_leaf:
            return node
        split = _best_split_gini(x[idx], y[idx], min_leaf, _candidate_features(x.shape[1], m_try, rng))
        if split is None:
            return node
        _, f, threshold = split
        mask = x[idx, f] <= threshold
        node.feature = f
        node.threshold = threshold
        node.left = build(idx[mask], depth + 1)
        node.right = build(idx[~mask], depth + 1)
        return node

    return build(np.arange(len(y)), 0)


def route(tree: TreeNode, row) -> TreeNode:
    """Leaf reached by a single row."""
    node = tree
    while not node.is_leaf:
        node = node.left if row[node.feature] <= node.threshold else node.right
    return node


def predict_tree(tree: TreeNode, x) -> np.ndarray:
    """Leaf majority labels; a 50/50 leaf predicts class 0."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return np.array([1 if route(tree, row).value > 0.5 else 0 for row in x], dtype=np.int64)


def fit_forest(
    x, y, n_trees, max_depth, m_try=None, seed=0,
    min_leaf=1, bootstrap=True, threads=1,
) -> ForestModel:
    """Bagged forest: each tree sees a seeded bootstrap resample and
    m_try random features per split (default ceil(sqrt(n_features))).
    Per-tree seeds derive from the master seed, so parallel fitting
    produces exactly the serial result."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    if m_try is None:
        m_try = math.ceil(math.sqrt(x.shape[1]))
    children = np.random.SeedSequence(seed).spawn(n_trees)

    def fit_one(child):
        rng = np.random.default_rng(child)
        idx = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        return fit_tree(x[idx], y[idx], max_depth, min_leaf=min_leaf, rng=rng, m_try=m_try)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trees = list(pool.map(fit_one, children))
    else:
        trees = [fit_one(child) for child in children]
    return ForestModel(trees=trees, m_try=m_try, seed=seed, bootstrap=bootstrap)


def predict_forest(model: ForestModel, x) -> np.ndarray:
    """Majority vote over trees; exact ties go to class 0."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    votes = np.zeros(len(x), dtype=np.int64)
    for tree in model.trees:
        votes += predict_tree(tree, x)
    return (votes * 2 > len(model.trees)).astype(np.int64)


def _best_split_variance(x, r, min_leaf):
    """Best (gain, feature, threshold) by sum-of-squares reduction."""
    n = len(r)
    total = r.sum()
    parent_sse_term = total * total / n  # constant shift dropped: maximize child terms
    best = None
    for f in range(x.shape[1]):
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        rs = r[order]
        distinct = np.nonzero(xs[:-1] < xs[1:])[0]
        if len(distinct) == 0:
            continue
        cum = np.cumsum(rs)
        for i in distinct:
            n_left = i + 1
            n_right = n - n_left
            if n_left < min_leaf or n_right < min_leaf:
                continue
            s_left = cum[i]
            s_right = total - s_left
            gain = s_left * s_left / n_left + s_right * s_right / n_right - parent_sse_term
            if gain > 0.0 and (best is None or gain > best[0]):
                best = (float(gain), int(f), float((xs[i] + xs[i + 1]) / 2.0))
    return best


def _fit_regression_tree(x, r, max_depth, min_leaf=1):
    def build(idx, depth):
        node = TreeNode(value=float(r[idx].mean()))
        if depth >= max_depth or len(idx) < 2 * min_leaf:
            node.counts = idx  # transient: rows for the Newton relabel
            return node
        split = _best_split_variance(x[idx], r[idx], min_leaf)
        if split is None:
            node.counts = idx
            return node
        _, f, threshold = split
        mask = x[idx, f] <= threshold
        node.feature = f
        node.threshold = threshold
        node.left = build(idx[mask], depth + 1)
        node.right = build(idx[~mask], depth + 1)
        return node

    return build(np.arange(len(r)), 0)


def _newton_relabel(tree, residual, hessian):
    """Replace leaf means with logistic Newton steps sum(r)/sum(p(1-p))."""
    if tree.is_leaf:
        idx = tree.counts
        denom = hessian[idx].sum()
        tree.value = float(residual[idx].sum() / denom) if denom > 0 else 0.0
        tree.counts = None
        return
    _newton_relabel(tree.left, residual, hessian)
    _newton_relabel(tree.right, residual, hessian)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def fit_boosted(x, y, n_trees, max_depth, learning_rate, seed=0) -> BoostedModel:
    """Gradient boosting with logistic loss.

    Starts from the training log-odds, fits each round's regression tree
    to the residuals y - p with variance-reduction splits, and applies
    Newton leaf values scaled by the shrinkage. Fitting is deterministic;
    `seed` is accepted for interface symmetry with the other baselines.
    """
    del seed
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise SingleClass()
    p_mean = y.mean()
    initial = math.log(p_mean / (1.0 - p_mean))
    scores = np.full(len(y), initial)
    trees: list[TreeNode] = []
    for _ in range(n_trees):
        p = _sigmoid(scores)
        residual = y - p
        hessian = p * (1.0 - p)
        tree = _fit_regression_tree(x, residual, max_depth)
        _newton_relabel(tree, residual, hessian)
        contrib = np.array([route(tree, row).value for row in x])
        scores = scores + learning_rate * contrib
        trees.append(tree)
    return BoostedModel(initial_score=initial, trees=trees, learning_rate=learning_rate)


def staged_scores(model: BoostedModel, x, k: int | None = None) -> np.ndarray:
    """Summed scores after the first k trees (all trees when k is None)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if k is None:
        k = len(model.trees)
    if not 0 <= k <= len(model.trees):
        raise ValueError(f"k must be in [0, {len(model.trees)}], got {k}")
    scores = np.full(len(x), model.initial_score)
    for tree in model.trees[:k]:
        scores += model.learning_rate * np.array([route(tree, row).value for row in x])
    return scores


def predict_boosted(model: BoostedModel, x, k: int | None = None) -> np.ndarray:
    """Sigmoid of summed scores thresholded at 0.5 (ties to class 0)."""
    return (_sigmoid(staged_scores(model, x, k)) > 0.5).astype(np.int64)


def training_log_loss(model: BoostedModel, x, y, k: int | None = None) -> float:
    p = _sigmoid(staged_scores(model, x, k))
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    y = np.asarray(y, dtype=np.float64)
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())
