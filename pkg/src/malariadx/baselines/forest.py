"""Random forest of Gini-impurity decision trees."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np

from ..checkpoint import decode_container, encode_container, write_bytes_atomic
from ..errors import CheckpointError, RejectedInputError


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 12
    min_samples_split: int = 2
    max_features: Optional[int] = None  # None: floor(sqrt(F))
    bootstrap: bool = True
    seed: int = 0


@dataclass
class DecisionTree:
    """Flat array form.  ``feature[i] == -1`` marks a leaf; ``value`` is P(class 1)."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def __len__(self) -> int:
        return len(self.feature)

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while np.any(active):
            rows = np.nonzero(active)[0]
            n = node[rows]
            go_left = X[rows, self.feature[n]] <= self.threshold[n]
            node[rows] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return node

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.leaf_index(np.atleast_2d(X))]

    def depth(self) -> int:
        best, stack = 0, [(0, 0)]
        while stack:
            i, d = stack.pop()
            best = max(best, d)
            if self.feature[i] >= 0:
                stack.extend([(self.left[i], d + 1), (self.right[i], d + 1)])
        return best

    def to_bytes(self) -> bytes:
        n = len(self)
        return (struct.pack("<I", n)
                + self.feature.astype("<i4").tobytes() + self.threshold.astype("<f8").tobytes()
                + self.left.astype("<i4").tobytes() + self.right.astype("<i4").tobytes()
                + self.value.astype("<f8").tobytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "DecisionTree":
        (n,) = struct.unpack("<I", buf[:4])
        if len(buf) != 4 + n * (4 + 8 + 4 + 4 + 8):
            raise CheckpointError("tree payload has the wrong length")
        off = 4
        parts = []
        for dt in ("<i4", "<f8", "<i4", "<i4", "<f8"):
            size = n * np.dtype(dt).itemsize
            parts.append(np.frombuffer(buf[off:off + size], dtype=dt))
            off += size
        feature, threshold, left, right, value = parts
        return cls(feature.astype(np.int64), threshold, left.astype(np.int64), right.astype(np.int64), value)


def _gini_best_split(x: np.ndarray, y: np.ndarray):
    """Best threshold on one feature: ``(weighted child gini, threshold)`` or None."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = len(xs)
    pos_left = np.cumsum(ys)[:-1]
    n_left = np.arange(1, n)
    valid = xs[1:] > xs[:-1]
    if not np.any(valid):
        return None
    n_right = n - n_left
    pos_right = ys.sum() - pos_left
    p_l = pos_left / n_left
    p_r = pos_right / n_right
    gini = (n_left * 2 * p_l * (1 - p_l) + n_right * 2 * p_r * (1 - p_r)) / n
    gini = np.where(valid, gini, np.inf)
    k = int(np.argmin(gini))
    thr = 0.5 * (xs[k] + xs[k + 1])
    if thr >= xs[k + 1]:  # adjacent floats: midpoint rounds up
        thr = xs[k]
    return gini[k], thr


def grow_tree(X: np.ndarray, y: np.ndarray, config: ForestConfig,
              rng: np.random.Generator) -> DecisionTree:
    n_features = X.shape[1]
    k = config.max_features or max(1, int(np.sqrt(n_features)))
    k = min(k, n_features)
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(rows):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[rows].mean()))
        return len(feature) - 1

    root_rows = np.arange(len(y))
    stack = [(new_node(root_rows), root_rows, 0)]
    while stack:
        node, rows, depth = stack.pop()
        ys = y[rows]
        if depth >= config.max_depth or len(rows) < config.min_samples_split or ys.min() == ys.max():
            continue
        parent = 2 * ys.mean() * (1 - ys.mean())
        best = None
        for f in rng.choice(n_features, size=k, replace=False):
            found = _gini_best_split(X[rows, f], ys)
            if found is not None and found[0] < parent - 1e-12 and (best is None or found[0] < best[0]):
                best = (found[0], int(f), found[1])
        if best is None:
            continue
        _, f, thr = best
        mask = X[rows, f] <= thr
        feature[node], threshold[node] = f, thr
        l_rows, r_rows = rows[mask], rows[~mask]
        left[node] = new_node(l_rows)
        right[node] = new_node(r_rows)
        stack.append((right[node], r_rows, depth + 1))
        stack.append((left[node], l_rows, depth + 1))
    return DecisionTree(np.array(feature), np.array(threshold, dtype=np.float64),
                        np.array(left), np.array(right), np.array(value, dtype=np.float64))


@dataclass
class RandomForest:
    trees: List[DecisionTree]
    n_features: int
    config: ForestConfig

    def _check(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise RejectedInputError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def tree_outputs(self, X) -> np.ndarray:
        """Leaf probability of every tree, shape (n_trees, n_samples)."""
        X = self._check(X)
        return np.stack([t.predict_proba(X) for t in self.trees])

    def predict_proba(self, X) -> np.ndarray:
        return self.tree_outputs(X).mean(axis=0)

    def predict_vote(self, X) -> np.ndarray:
        """Majority vote of per-tree hard predictions (ties count as positive)."""
        votes = (self.tree_outputs(X) >= 0.5).sum(axis=0)
        return (2 * votes >= len(self.trees)).astype(np.int64)

    def to_bytes(self) -> bytes:
        meta = json.dumps({**asdict(self.config), "n_features": self.n_features}, sort_keys=True)
        return encode_container(meta, [(f"tree{i}", t.to_bytes()) for i, t in enumerate(self.trees)])

    @classmethod
    def from_bytes(cls, buf: bytes) -> "RandomForest":
        text, entries = decode_container(buf)
        meta = json.loads(text)
        n_features = meta.pop("n_features")
        trees = []
        for i, (name, payload) in enumerate(entries):
            if name != f"tree{i}" or not isinstance(payload, bytes):
                raise CheckpointError(f"unexpected forest entry {name!r}")
            trees.append(DecisionTree.from_bytes(payload))
        return cls(trees, n_features, ForestConfig(**meta))


def train_random_forest(X, y, config: ForestConfig = ForestConfig()) -> RandomForest:
    """Grow ``config.n_trees`` trees on bootstrap resamples with random feature subsets."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise RejectedInputError("X must be (n_samples, n_features) matching y")
    if len(y) < 2:
        raise RejectedInputError("need at least two samples")
    if not set(np.unique(y)) <= {0.0, 1.0}:
        raise RejectedInputError("labels must be 0 or 1")
    if len(np.unique(y)) < 2:
        raise RejectedInputError("both classes must be present")
    trees = []
    for i in range(config.n_trees):
        rng = np.random.default_rng([config.seed, i])
        rows = rng.integers(0, len(y), size=len(y)) if config.bootstrap else np.arange(len(y))
        trees.append(grow_tree(X[rows], y[rows], config, rng))
    return RandomForest(trees, X.shape[1], config)


def rf_predict(forest: RandomForest, features) -> float:
    """Mean leaf probability across trees for one feature vector."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 1:
        raise RejectedInputError("rf_predict takes a single feature vector")
    return float(forest.predict_proba(features[None, :])[0])


def save_forest(forest: RandomForest, path) -> None:
    write_bytes_atomic(path, forest.to_bytes())


def load_forest(path) -> RandomForest:
    with open(path, "rb") as fh:
        return RandomForest.from_bytes(fh.read())
