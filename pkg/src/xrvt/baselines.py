"""Non-neural comparators: brute-force KNN and the majority-class predictor.

A random-forest comparator is not included.  The tuned setting reported for
this task, for anyone adding one: n_estimators=500, min_samples_leaf=1,
max_features=3, criterion="entropy".
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class KnnConfig:
    k: int = 30

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")


def _flatten(x) -> np.ndarray:
    x = np.asarray(x)
    return x.reshape(x.shape[0], -1)


def vote(dist: np.ndarray, labels: np.ndarray, k: int, num_classes: int | None = None) -> int:
    """Label of the k nearest by Euclidean distance, with deterministic ties.

    Neighbours are ranked by (distance, label), the modal label wins, then
    the smallest summed distance, then the lowest class index.  None of the
    rules look at training order.
    """
    n = dist.shape[0]
    k = min(k, n)
    order = np.lexsort((labels, dist))[:k]
    near_lab = labels[order]
    near_dist = np.sqrt(dist[order])
    C = int(labels.max()) + 1 if num_classes is None else num_classes
    votes = np.bincount(near_lab, minlength=C)
    tied = np.flatnonzero(votes == votes.max())
    if tied.size == 1:
        return int(tied[0])
    sums = np.array([near_dist[near_lab == c].sum() for c in tied])
    return int(tied[np.flatnonzero(sums == sums.min())[0]])


class KNNClassifier:
    def __init__(self, cfg: KnnConfig = KnnConfig()):
        self.cfg = cfg
        self.X: np.ndarray | None = None
        self.y: np.ndarray | None = None
        self.num_classes = 0

    def fit(self, X, y, num_classes: int | None = None) -> "KNNClassifier":
        X = _flatten(X)
        if X.shape[0] < 1:
            raise ContractError("KNN needs at least one training image")
        self.X = np.ascontiguousarray(X)
        self.y = np.asarray(y, dtype=np.int64)
        self.num_classes = num_classes or int(self.y.max()) + 1
        return self

    def predict_one(self, query) -> int:
        q = np.asarray(query).reshape(-1)
        if q.size != self.X.shape[1]:
            raise ContractError(f"query has {q.size} features, training data {self.X.shape[1]}")
        dist = _kernels.sq_distances(self.X, q.astype(self.X.dtype, copy=False))
        return vote(dist, self.y, self.cfg.k, self.num_classes)

    def predict(self, queries) -> np.ndarray:
        return np.array([self.predict_one(q) for q in _flatten(queries)], dtype=np.int64)


def knn_predict(train, query, cfg: KnnConfig = KnnConfig()) -> int:
    """Classify one image against a :class:`~xrvt.dataset.Dataset`."""
    clf = KNNClassifier(cfg).fit(train.pixels(), train.labels, len(train.class_names))
    return clf.predict_one(query)


class MajorityClassifier:
    """Always predicts the most frequent training class (lowest index on ties)."""

    def fit(self, labels, num_classes: int | None = None) -> "MajorityClassifier":
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size == 0:
            raise ContractError("majority classifier needs a non-empty training set")
        counts = np.bincount(labels, minlength=num_classes or 0)
        self.label = int(np.argmax(counts))
        return self

    def predict(self, queries) -> np.ndarray:
        return np.full(len(queries), self.label, dtype=np.int64)


def majority_classifier(train) -> MajorityClassifier:
    return MajorityClassifier().fit(train.labels, len(train.class_names))
