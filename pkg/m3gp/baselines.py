"""
Reference classifiers: a CART decision tree (Gini impurity) and a bagged
random forest of such trees.
"""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .dataset import Dataset, read_json
from .exceptions import DataError

logger = logging.getLogger(__name__)

DEFAULT_TREES = 100
DEFAULT_FOREST_DEPTH = 6
MIN_GAIN = 1e-12


@dataclass
class TreeNode:
    """Internal node when feature >= 0 (left: value <= threshold), leaf otherwise."""

    counts: Tuple[int, ...]
    prediction: int
    feature: int = -1
    threshold: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0

    def depth(self) -> int:
        """Number of split levels below this node (a lone leaf is 0)."""
        deepest = 0
        stack = [(self, 0)]
        while stack:
            node, level = stack.pop()
            deepest = max(deepest, level)
            if not node.is_leaf:
                stack.append((node.left, level + 1))
                stack.append((node.right, level + 1))
        return deepest

    def to_dict(self) -> Dict[str, Any]:
        payload = {"counts": list(self.counts), "prediction": self.prediction}
        if not self.is_leaf:
            payload.update(feature=self.feature, threshold=self.threshold,
                           left=self.left.to_dict(), right=self.right.to_dict())
        return payload

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "TreeNode":
        node = cls(counts=tuple(payload["counts"]), prediction=int(payload["prediction"]))
        if "feature" in payload:
            node.feature = int(payload["feature"])
            node.threshold = float(payload["threshold"])
            node.left = cls.from_dict(payload["left"])
            node.right = cls.from_dict(payload["right"])
        return node


def gini_from_counts(counts: np.ndarray) -> np.ndarray:
    """Gini impurity of one count vector, or row-wise over a (n, classes) matrix."""
    counts = np.asarray(counts, dtype=float)
    totals = counts.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(totals > 0, counts / totals, 0.0)
    return 1.0 - np.sum(probs ** 2, axis=-1)


def _best_split(X: np.ndarray, y: np.ndarray, n_classes: int,
                features: Sequence[int]) -> Optional[Tuple[float, int, float]]:
    """(gain, feature, threshold) of the best Gini split over `features`, or None."""
    n = y.shape[0]
    parent = np.bincount(y, minlength=n_classes)
    parent_gini = float(gini_from_counts(parent))
    one_hot = np.eye(n_classes, dtype=np.int64)[y]
    best = None

    for f in sorted(features):
        order = np.argsort(X[:, f], kind="mergesort")
        values = X[order, f]
        valid = np.flatnonzero(values[1:] != values[:-1]) + 1  # left side holds rows [0, i)
        if valid.size == 0:
            continue
        left = np.cumsum(one_hot[order], axis=0)[valid - 1]
        right = parent - left
        n_left = valid.astype(float)
        weighted = (n_left * gini_from_counts(left) + (n - n_left) * gini_from_counts(right)) / n
        gains = parent_gini - weighted
        pick = int(np.argmax(gains))
        gain = float(gains[pick])
        if best is None or gain > best[0]:
            i = valid[pick]
            low, high = values[i - 1], values[i]
            threshold = 0.5 * (low + high)
            if threshold >= high:
                threshold = low
            best = (gain, f, float(threshold))
    return best


def _grow(X: np.ndarray, y: np.ndarray, n_classes: int, max_depth: Optional[int],
          max_features: Optional[int], rng: Optional[np.random.Generator]) -> TreeNode:
    k = X.shape[1]

    def make_leaf(rows: np.ndarray) -> TreeNode:
        counts = np.bincount(y[rows], minlength=n_classes)
        return TreeNode(counts=tuple(int(c) for c in counts), prediction=int(np.argmax(counts)))

    root = make_leaf(np.arange(y.shape[0]))
    stack = [(root, np.arange(y.shape[0]), 0)]
    while stack:
        node, rows, depth = stack.pop()
        if max(node.counts) == rows.size:
            continue
        if max_depth is not None and depth >= max_depth:
            continue
        if max_features is None or max_features >= k:
            features = range(k)
        else:
            features = rng.choice(k, size=max_features, replace=False).tolist()
        split = _best_split(X[rows], y[rows], n_classes, features)
        if split is None or split[0] <= MIN_GAIN:
            continue
        _, feature, threshold = split
        goes_left = X[rows, feature] <= threshold
        left_rows, right_rows = rows[goes_left], rows[~goes_left]
        node.feature, node.threshold = feature, threshold
        node.left, node.right = make_leaf(left_rows), make_leaf(right_rows)
        stack.append((node.right, right_rows, depth + 1))
        stack.append((node.left, left_rows, depth + 1))
    return root


def _route(root: TreeNode, X: np.ndarray) -> np.ndarray:
    """Leaf class index for every row."""
    out = np.empty(X.shape[0], dtype=int)
    stack = [(root, np.arange(X.shape[0]))]
    while stack:
        node, rows = stack.pop()
        if rows.size == 0:
            continue
        if node.is_leaf:
            out[rows] = node.prediction
            continue
        goes_left = X[rows, node.feature] <= node.threshold
        stack.append((node.left, rows[goes_left]))
        stack.append((node.right, rows[~goes_left]))
    return out


def _encode(train: Dataset) -> Tuple[Tuple[str, ...], np.ndarray]:
    if train.n_rows == 0:
        raise DataError("cannot train on an empty dataset")
    classes = train.classes
    lookup = {c: i for i, c in enumerate(classes)}
    return classes, np.array([lookup[label] for label in train.labels], dtype=int)


def _check_arity(X: np.ndarray, arity: int):
    if X.shape[1] != arity:
        raise DataError(f"model was trained on {arity} features, data has {X.shape[1]}")


class _Scoring:
    classes: Tuple[str, ...]

    def predict(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict_dataset(self, dataset: Dataset) -> np.ndarray:
        return self.predict(dataset.X)

    def score(self, dataset: Dataset) -> float:
        return float(np.mean(self.predict_dataset(dataset) == dataset.labels))


@dataclass
class TreeModel(_Scoring):
    root: TreeNode
    classes: Tuple[str, ...]
    arity: int
    max_depth: Optional[int] = None

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        _check_arity(X, self.arity)
        return np.asarray(self.classes)[_route(self.root, X)]

    def to_dict(self) -> Dict[str, Any]:
        return {"type": "dt", "classes": list(self.classes), "arity": self.arity,
                "max_depth": self.max_depth, "root": self.root.to_dict()}


@dataclass
class ForestModel(_Scoring):
    trees: List[TreeNode]
    classes: Tuple[str, ...]
    arity: int
    seeds: List[int]
    max_features: int
    max_depth: Optional[int] = DEFAULT_FOREST_DEPTH

    def votes(self, X: np.ndarray) -> np.ndarray:
        """(rows, classes) vote counts."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        _check_arity(X, self.arity)
        tally = np.zeros((X.shape[0], len(self.classes)), dtype=int)
        rows = np.arange(X.shape[0])
        for tree in self.trees:
            np.add.at(tally, (rows, _route(tree, X)), 1)
        return tally

    def predict(self, X: np.ndarray) -> np.ndarray:
        # argmax keeps the first class on a tied vote
        return np.asarray(self.classes)[np.argmax(self.votes(X), axis=1)]

    def to_dict(self) -> Dict[str, Any]:
        return {"type": "rf", "classes": list(self.classes), "arity": self.arity,
                "seeds": list(self.seeds), "max_features": self.max_features,
                "max_depth": self.max_depth, "trees": [t.to_dict() for t in self.trees]}


def dt_fit(train: Dataset, max_depth: Optional[int] = None) -> TreeModel:
    """Greedy CART tree; unbounded depth unless max_depth is given."""
    classes, y = _encode(train)
    root = _grow(train.X, y, len(classes), max_depth, None, None)
    return TreeModel(root=root, classes=classes, arity=train.arity, max_depth=max_depth)


def dt_predict(model: TreeModel, x: Sequence[float]) -> str:
    return str(model.predict(np.asarray(x, dtype=float).reshape(1, -1))[0])


def rf_fit(train: Dataset, n_trees: int = DEFAULT_TREES, max_depth: Optional[int] = DEFAULT_FOREST_DEPTH,
           rng: Optional[np.random.Generator] = None, max_features: Optional[int] = None,
           bootstrap: bool = True, workers: int = 1) -> ForestModel:
    """
    Bagged forest of CART trees.

    Args:
        train: Training data
        n_trees: Number of trees
        max_depth: Depth cap per tree
        rng: Source of the per-tree seeds
        max_features: Features tried per split, floor(sqrt(k)) when None
        bootstrap: Resample n rows with replacement per tree
        workers: Threads used to grow trees

    Returns:
        Fitted ForestModel
    """
    if n_trees < 1:
        raise DataError(f"n_trees must be at least 1, got {n_trees}")
    classes, y = _encode(train)
    if rng is None:
        rng = np.random.default_rng(0)
    k = train.arity
    if max_features is None:
        max_features = max(1, math.isqrt(k))
    max_features = min(max_features, k)
    seeds = [int(s) for s in rng.integers(0, 2 ** 32, size=n_trees)]
    X = train.X
    n = train.n_rows

    def grow_one(seed: int) -> TreeNode:
        tree_rng = np.random.default_rng(seed)
        rows = tree_rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        return _grow(X[rows], y[rows], len(classes), max_depth, max_features, tree_rng)

    if workers > 1 and n_trees > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trees = list(pool.map(grow_one, seeds))
    else:
        trees = [grow_one(seed) for seed in seeds]
    logger.debug(f"Grew {n_trees} trees (max depth {max_depth}, {max_features} features per split)")
    return ForestModel(trees=trees, classes=classes, arity=k, seeds=seeds,
                       max_features=max_features, max_depth=max_depth)


def rf_predict(model: ForestModel, x: Sequence[float]) -> str:
    """Majority vote for one row; ties go to the first-declared class."""
    return str(model.predict(np.asarray(x, dtype=float).reshape(1, -1))[0])


def baseline_from_dict(payload: Dict[str, Any]) -> Union[TreeModel, ForestModel]:
    kind = payload.get("type")
    classes = tuple(payload["classes"])
    if kind == "dt":
        return TreeModel(root=TreeNode.from_dict(payload["root"]), classes=classes,
                         arity=int(payload["arity"]), max_depth=payload.get("max_depth"))
    if kind == "rf":
        return ForestModel(trees=[TreeNode.from_dict(t) for t in payload["trees"]], classes=classes,
                           arity=int(payload["arity"]), seeds=list(payload["seeds"]),
                           max_features=int(payload["max_features"]), max_depth=payload.get("max_depth"))
    raise DataError(f"unknown baseline model type {kind!r}")


def save_baseline(model: Union[TreeModel, ForestModel], path: Union[str, Path]):
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(model.to_dict(), handle)
        handle.write("\n")


def load_baseline(path: Union[str, Path]) -> Union[TreeModel, ForestModel]:
    payload = read_json(path)
    if not isinstance(payload, dict):
        raise DataError(f"{path} does not hold a model")
    return baseline_from_dict(payload)
