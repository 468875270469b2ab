"""Linear embedding heads."""

from __future__ import annotations

import math

import numpy as np

from .numcore import Param


class EmbeddingHead:
    """Bias-free linear map from d features to an e-dimensional embedding."""

    def __init__(self, d: int, e: int, rng: np.random.Generator | None = None,
                 lr_scale: float = 10.0, name: str = "head"):
        if d < 1 or e < 1:
            raise ValueError("head dimensions must be >= 1")
        rng = np.random.default_rng() if rng is None else rng
        bound = 1.0 / math.sqrt(d)
        self.W = Param(rng.uniform(-bound, bound, size=(d, e)), name=f"{name}.W", lr_scale=lr_scale)

    @property
    def d(self) -> int:
        return self.W.value.shape[0]

    @property
    def e(self) -> int:
        return self.W.value.shape[1]

    def params(self):
        return [self.W]

    def embed(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.d:
            raise ValueError(f"expected (N, {self.d}) input, got {X.shape}")
        return X @ self.W.value

    def embed_backward(self, X: np.ndarray, upstream: np.ndarray):
        """Accumulate dL/dW into the head and return (grad_W, grad_X)."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.d or upstream.shape != (X.shape[0], self.e):
            raise ValueError("gradient shapes do not match the forward pass")
        grad_W = X.T @ upstream
        self.W.grad += grad_W
        return grad_W, upstream @ self.W.value.T
