"""Distilling a per-head ensemble into one embedding with a tanh regressor."""

from __future__ import annotations

import logging
import math

import numpy as np

from .featstore import FeatureDataset, epoch_batches
from .numcore import Adam, Param

log = logging.getLogger(__name__)


def concat_weighted(per_head, weights) -> np.ndarray:
    """Stack sqrt(w_j)-scaled head embeddings along the last axis.

    ``per_head`` has shape (M, e) for one sample or (M, N, e) for a batch.
    Squared distances between the results equal the weighted ensemble distance.
    """
    per_head = np.asarray(per_head, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if per_head.shape[0] != len(weights):
        raise ValueError("one weight per head is required")
    if np.any(weights <= 0):
        raise ValueError("concatenation weights must be positive")
    scaled = np.sqrt(weights).reshape((-1,) + (1,) * (per_head.ndim - 1)) * per_head
    return np.concatenate(list(scaled), axis=-1)


class CompressionRegressor:
    """g(f) = tanh(f A + b) mapping an (M*e)-vector to e dimensions."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        rng = np.random.default_rng() if rng is None else rng
        bound = 1.0 / math.sqrt(in_dim)
        self.A = Param(rng.uniform(-bound, bound, size=(in_dim, out_dim)), name="regressor.A")
        self.b = Param(np.zeros(out_dim), name="regressor.b", decay=False)

    def params(self):
        return [self.A, self.b]

    def compress(self, F: np.ndarray) -> np.ndarray:
        F = np.asarray(F, dtype=np.float64)
        if F.shape[-1] != self.A.value.shape[0]:
            raise ValueError(f"expected input width {self.A.value.shape[0]}, got {F.shape[-1]}")
        return np.tanh(F @ self.A.value + self.b.value)

    def backward(self, F: np.ndarray, G: np.ndarray, grad_G: np.ndarray):
        """Accumulate parameter gradients given the forward output ``G``."""
        pre = grad_G * (1.0 - G * G)
        self.A.grad += F.T @ pre
        self.b.grad += pre.sum(axis=0)


def pairwise_sqdist(X: np.ndarray) -> np.ndarray:
    sq = np.sum(X * X, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


def normalized_distance_matrix(points, dist=pairwise_sqdist) -> np.ndarray:
    """Pairwise squared distances divided by their sum over all ordered pairs."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        raise ValueError("need at least two points")
    D = dist(points)
    total = D.sum()
    if total <= 0:
        raise ValueError("all points coincide; the distance matrix cannot be normalized")
    return D / total


def distance_loss(K: np.ndarray, K2: np.ndarray):
    """``|K - K2|_F^2 / N^2`` and its gradient w.r.t. ``K2``."""
    if K.shape != K2.shape or K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError("K and K' must be square matrices of equal shape")
    N = K.shape[0]
    diff = K2 - K
    return float(np.sum(diff * diff) / N**2), 2.0 * diff / N**2


def distance_loss_grad_points(G: np.ndarray, K: np.ndarray):
    """Loss and d l_dist / d G where K' is built from the rows of ``G``."""
    D = pairwise_sqdist(G)
    S = D.sum()
    loss, gK2 = distance_loss(K, D / S)
    gD = gK2 / S - np.sum(gK2 * D) / S**2
    Hs = gD + gD.T
    gG = 2.0 * (Hs.sum(axis=1)[:, None] * G - Hs @ G)
    return loss, gG


def compressor_loss(reg: CompressionRegressor, F: np.ndarray, K: np.ndarray, backward=True):
    G = reg.compress(F)
    loss, gG = distance_loss_grad_points(G, K)
    if backward:
        reg.backward(F, G, gG)
    return loss


def train_compressor(model, data: FeatureDataset, epochs: int = 30, P: int = 8, K: int = 4,
                     lr: float = 1e-3, eps: float = 1e-8, weight_decay: float = 0.0,
                     rng: np.random.Generator | None = None,
                     reg: CompressionRegressor | None = None, on_epoch=None):
    """Fit a regressor so compressed distances match the frozen ensemble's.

    ``model`` only needs ``per_head_embeddings(X)`` and ``weights()``.
    Returns ``(regressor, [mean l_dist per epoch])``.
    """
    rng = np.random.default_rng() if rng is None else rng
    w = model.weights()
    n_heads = len(model.per_head_embeddings(data.features[:1]))
    e = model.per_head_embeddings(data.features[:1]).shape[-1]
    if reg is None:
        reg = CompressionRegressor(n_heads * e, e, rng)
    history = []
    if epochs <= 0:
        return reg, history
    opt = Adam(reg.params(), lr=lr, eps=eps, weight_decay=weight_decay)
    for epoch in range(1, epochs + 1):
        losses = []
        for batch in epoch_batches(data, P, K, rng):
            F = concat_weighted(model.per_head_embeddings(batch.features), w)
            try:
                K_target = normalized_distance_matrix(F)
            except ValueError:
                log.warning("epoch %d: skipping degenerate batch", epoch)
                continue
            losses.append(compressor_loss(reg, F, K_target))
            opt.step()
        mean = float(np.mean(losses)) if losses else float("nan")
        history.append(mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    return reg, history


def compressed_embeddings(model, reg: CompressionRegressor, X) -> np.ndarray:
    return reg.compress(concat_weighted(model.per_head_embeddings(X), model.weights()))
