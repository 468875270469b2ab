"""Retrieval and clustering metrics for learned embeddings."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .compressor import concat_weighted


def _sqdist(X: np.ndarray) -> np.ndarray:
    sq = np.sum(X * X, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


class DistanceSource:
    """Pairwise squared distances over a test set.

    Either a single embedding matrix, or per-head unit embeddings with
    weights, in which case the distance is the weighted per-head sum.  Both
    expose ``points`` (Euclidean coordinates whose squared distances match)
    so clustering can run on either.
    """

    def __init__(self, points: np.ndarray, per_head: np.ndarray | None = None,
                 weights: np.ndarray | None = None):
        self.points = np.asarray(points, dtype=np.float64)
        self.per_head = per_head
        self.weights = weights

    @classmethod
    def from_embedding(cls, emb) -> "DistanceSource":
        return cls(np.asarray(emb, dtype=np.float64))

    @classmethod
    def from_heads(cls, per_head, weights) -> "DistanceSource":
        per_head = np.asarray(per_head, dtype=np.float64)
        weights = np.asarray(weights, dtype=np.float64)
        return cls(concat_weighted(per_head, weights), per_head, weights)

    def __len__(self):
        return len(self.points)

    def pairwise(self) -> np.ndarray:
        if self.per_head is None:
            return _sqdist(self.points)
        N = self.per_head.shape[1]
        D = np.zeros((N, N))
        for w, U in zip(self.weights, self.per_head):
            D += w * (2.0 - 2.0 * U @ U.T)
        np.maximum(D, 0.0, out=D)
        np.fill_diagonal(D, 0.0)
        return D


def _as_distances(src) -> np.ndarray:
    if isinstance(src, DistanceSource):
        return src.pairwise()
    src = np.asarray(src, dtype=np.float64)
    if src.ndim != 2 or src.shape[0] != src.shape[1]:
        raise ValueError("expected a DistanceSource or a square distance matrix")
    return src


def neighbor_order(D: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest non-self points per row; ties go to the lower index."""
    N = D.shape[0]
    if k >= N:
        raise ValueError(f"k={k} must be smaller than the number of points {N}")
    D = D.copy()
    np.fill_diagonal(D, np.inf)
    return np.argsort(D, axis=1, kind="stable")[:, :k]


def recall_at_k(src, labels, k: int) -> float:
    labels = np.asarray(labels)
    nn = neighbor_order(_as_distances(src), k)
    return float(np.mean(np.any(labels[nn] == labels[:, None], axis=1)))


def knn_accuracy(src, labels, k: int = 3) -> float:
    """Fraction of queries with at least ceil(k/2) same-label points among their k neighbours."""
    labels = np.asarray(labels)
    nn = neighbor_order(_as_distances(src), k)
    hits = np.sum(labels[nn] == labels[:, None], axis=1)
    return float(np.mean(hits >= math.ceil(k / 2)))


def kmeans(X: np.ndarray, k: int, seed: int = 0, max_iter: int = 100):
    """k-means++ seeding followed by Lloyd iterations.

    Returns ``(assignment, centroids)``.  Empty clusters are re-seeded at the
    point farthest from its current centroid.
    """
    X = np.asarray(X, dtype=np.float64)
    N = len(X)
    if k < 1 or k > N:
        raise ValueError(f"k={k} must lie in [1, {N}]")
    rng = np.random.default_rng(seed)
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(N)]
    closest = np.sum((X - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, N - 1)
        else:
            idx = int(rng.integers(N))
        centers[c] = X[idx]
        closest = np.minimum(closest, np.sum((X - centers[c]) ** 2, axis=1))

    assign = None
    for _ in range(max_iter):
        d2 = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new = np.argmin(d2, axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            members = assign == c
            if members.any():
                centers[c] = X[members].mean(axis=0)
            else:
                far = int(np.argmax(d2[np.arange(N), assign]))
                centers[c] = X[far]
                assign[far] = c
                d2[far] = 0.0
    return assign, centers


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(pred, truth) -> float:
    """2 I(Y;C) / (H(Y) + H(C)) from the contingency table; 0 when both entropies vanish."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if len(pred) == 0 or len(pred) != len(truth):
        raise ValueError("nmi needs two non-empty label vectors of equal length")
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(truth, return_inverse=True)
    table = np.zeros((pi.max() + 1, ti.max() + 1))
    np.add.at(table, (pi, ti), 1.0)
    n = table.sum()
    h_c = _entropy(table.sum(axis=1))
    h_y = _entropy(table.sum(axis=0))
    if h_c + h_y == 0:
        return 0.0
    pxy = table / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0)) / n**2
    nz = pxy > 0
    mi = float(np.sum(pxy[nz] * np.log(pxy[nz] / outer[nz])))
    return max(0.0, min(1.0, 2.0 * mi / (h_c + h_y)))


@dataclass
class MetricsReport:
    recall: dict
    nmi: float
    knn_acc: float
    cluster_k: int
    seed: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recall"] = {str(k): v for k, v in self.recall.items()}
        return d


def evaluate(src: DistanceSource, labels, ks=(1, 2, 4, 8), cluster_k: int | None = None,
             seed: int = 0) -> MetricsReport:
    labels = np.asarray(labels)
    D = src.pairwise()
    recall = {int(k): recall_at_k(D, labels, k) for k in ks}
    cluster_k = len(np.unique(labels)) if cluster_k is None else cluster_k
    assign, _ = kmeans(src.points, cluster_k, seed=seed)
    return MetricsReport(recall=recall, nmi=nmi(assign, labels),
                         knn_acc=knn_accuracy(D, labels, 3), cluster_k=cluster_k, seed=seed)
