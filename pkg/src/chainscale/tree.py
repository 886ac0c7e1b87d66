"""Gini decision tree that flags critical microservice nodes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from .errors import DomainError

CRITICAL = "critical"
NON_CRITICAL = "non_critical"
FEATURE_NAMES = ("latency", "cpu_util", "mem_util")


@dataclass(frozen=True)
class NodeFeatures:
    latency: float
    cpu_util: float
    mem_util: float

    def __post_init__(self):
        if self.latency < 0:
            raise DomainError("latency must be >= 0")
        for name in ("cpu_util", "mem_util"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.latency, self.cpu_util, self.mem_util], dtype=float)


@dataclass
class TreeNode:
    # leaf when feature is None
    label: int
    feature: int | None = None
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self):
        return self.feature is None


def gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - np.sum(p * p))


def best_split(X: np.ndarray, y: np.ndarray, n_classes: int):
    """Exhaustive midpoint search. Returns (gain, feature, threshold) or None.

    Ties go to the lowest feature index, then the lowest threshold.
    """
    n = len(y)
    parent = gini(np.bincount(y, minlength=n_classes))
    best = None
    for feature in range(X.shape[1]):
        order = np.argsort(X[:, feature], kind="stable")
        xs = X[order, feature]
        ys = y[order]
        left = np.zeros(n_classes)
        right = np.bincount(ys, minlength=n_classes).astype(float)
        for i in range(n - 1):
            left[ys[i]] += 1
            right[ys[i]] -= 1
            if xs[i] == xs[i + 1]:
                continue
            n_left = i + 1
            child = (n_left * gini(left) + (n - n_left) * gini(right)) / n
            gain = parent - child
            if best is None or gain > best[0] + 1e-12:
                best = (gain, feature, (xs[i] + xs[i + 1]) / 2.0)
    return best


class CriticalNodeClassifier(ClassifierMixin, BaseEstimator):
    """Binary decision tree grown greedily on Gini impurity reduction.

    Splits test ``x[feature] < threshold`` (true goes left) with thresholds at
    midpoints between consecutive distinct feature values. An impure node is
    split even when the best gain is zero, which lets XOR-shaped labels
    resolve one level deeper.
    """

    def __init__(self, max_depth=3, min_samples_split=2):
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split

    def fit(self, X, y):
        if self.max_depth < 1:
            raise DomainError("max_depth must be >= 1")
        X, y = check_X_y(X, y, dtype=float)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        self.degenerate_ = len(self.classes_) < 2
        self.tree_ = self._grow(X, y_idx, depth=0)
        return self

    def _grow(self, X, y, depth):
        counts = np.bincount(y, minlength=len(self.classes_))
        label = int(np.argmax(counts))
        if depth >= self.max_depth or len(y) < self.min_samples_split or np.count_nonzero(counts) <= 1:
            return TreeNode(label)
        split = best_split(X, y, len(self.classes_))
        if split is None:
            return TreeNode(label)
        _, feature, threshold = split
        mask = X[:, feature] < threshold
        return TreeNode(
            label,
            feature,
            float(threshold),
            self._grow(X[mask], y[mask], depth + 1),
            self._grow(X[~mask], y[~mask], depth + 1),
        )

    def _leaf(self, x):
        node = self.tree_
        while not node.is_leaf:
            node = node.left if x[node.feature] < node.threshold else node.right
        return node.label

    def predict(self, X):
        check_is_fitted(self, "tree_")
        X = check_array(X, dtype=float)
        return self.classes_[[self._leaf(row) for row in X]]

    @property
    def depth_(self):
        check_is_fitted(self, "tree_")

        def depth(node):
            return 0 if node.is_leaf else 1 + max(depth(node.left), depth(node.right))

        return depth(self.tree_)

    def export_text(self, feature_names=FEATURE_NAMES) -> str:
        check_is_fitted(self, "tree_")
        lines = []

        def walk(node, indent):
            pad = "|   " * indent
            if node.is_leaf:
                lines.append(f"{pad}class: {self.classes_[node.label]}")
                return
            name = feature_names[node.feature]
            lines.append(f"{pad}{name} < {node.threshold:.4g}")
            walk(node.left, indent + 1)
            lines.append(f"{pad}{name} >= {node.threshold:.4g}")
            walk(node.right, indent + 1)

        walk(self.tree_, 0)
        return "\n".join(lines)


def _split_labeled(data):
    X, y = [], []
    for features, label in data:
        X.append(features.as_array() if isinstance(features, NodeFeatures) else features)
        y.append(label)
    return np.asarray(X, dtype=float), np.asarray(y)


def train_tree(data: Iterable[tuple[NodeFeatures, str]], max_depth: int = 3) -> CriticalNodeClassifier:
    X, y = _split_labeled(data)
    if len(y) == 0:
        raise DomainError("train_tree needs at least one labeled example")
    return CriticalNodeClassifier(max_depth=max_depth).fit(X, y)


def classify_node(tree: CriticalNodeClassifier, features: NodeFeatures) -> str:
    return str(tree.predict(features.as_array()[None, :])[0])


def error_rate(tree: CriticalNodeClassifier, recent: Sequence[tuple[NodeFeatures, str]]) -> float:
    X, y = _split_labeled(recent)
    return float(np.mean(tree.predict(X) != y))


def check_retrain(
    tree: CriticalNodeClassifier,
    recent: Sequence[tuple[NodeFeatures, str]],
    error_threshold: float = 0.05,
) -> str:
    """``"retrain"`` iff the misclassification rate on ``recent`` strictly exceeds the threshold."""
    if not recent:
        raise DomainError("check_retrain needs recent samples")
    if not 0.0 < error_threshold < 1.0:
        raise DomainError("error_threshold must lie in (0, 1)")
    return "retrain" if error_rate(tree, recent) > error_threshold else "keep"
