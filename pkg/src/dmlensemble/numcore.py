"""Small dense numeric kernel: parameters, Adam, cosine schedule, normalization, gradient checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NORM_EPS = 1e-12


@dataclass(eq=False)
class Param:
    """A trainable array with its gradient buffer."""

    value: np.ndarray
    name: str = "param"
    lr_scale: float = 1.0
    decay: bool = True
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        if self.lr_scale <= 0:
            raise ValueError("lr_scale must be positive")

    def zero_grad(self):
        self.grad.fill(0.0)


class Adam:
    """Adam with bias correction and decoupled weight decay.

    The effective step size of each parameter is ``lr * param.lr_scale * lr_factor``
    where ``lr_factor`` comes from the caller's schedule.  Weight decay is applied
    straight to the value, scaled by the same effective step size.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=0.01, weight_decay=1e-4):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr_factor: float = 1.0):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            lr = self.lr * p.lr_scale * lr_factor
            if self.weight_decay and p.decay:
                p.value -= lr * self.weight_decay * p.value
            p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.zero_grad()

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def cosine_anneal(lr0: float, t: int, T: int) -> float:
    if T < 1:
        raise ValueError("horizon T must be >= 1")
    if t < 0 or t > T:
        raise ValueError(f"step {t} outside [0, {T}]")
    return lr0 * (1.0 + math.cos(math.pi * t / T)) / 2.0


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` (a vector, or each row of a matrix) to unit length; zero stays zero."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norm, NORM_EPS)


def is_degenerate(v: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    return np.linalg.norm(np.asarray(v, dtype=np.float64), axis=-1) < tol


def l2_normalize_backward(x: np.ndarray, grad_u: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``x`` of a function of ``u = l2_normalize(x)`` (row-wise)."""
    norm = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), NORM_EPS)
    u = x / norm
    return (grad_u - u * np.sum(grad_u * u, axis=-1, keepdims=True)) / norm


def finite_diff_check(fn, arrays, eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn()`` must return ``(value, grads)`` where ``grads`` lines up with
    ``arrays``; the arrays are perturbed in place and restored.  Relative error
    is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    value, grads = fn()
    if not np.isfinite(value):
        raise FloatingPointError("function value is not finite")
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in grads]
    worst = 0.0
    for arr, ga in zip(arrays, analytic):
        flat = arr.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn()[0]
            flat[i] = orig - eps
            fm = fn()[0]
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("function value is not finite")
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(gflat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
