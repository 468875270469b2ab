"""Weighted ensembles of metric-learning losses.

Three training variants share one objective routine:

* ``WEL``       one shared head, learnable loss weights with a simplex penalty
* ``WEL-equal`` one shared head, fixed weights 1/M
* ``WEDL``      one head per loss, learnable weights, plus a diversity hinge

``baseline`` is the single-loss degenerate case (M=1, weight 1).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .evalkit import DistanceSource
from .featstore import FeatureDataset, epoch_batches
from .heads import EmbeddingHead
from .numcore import Adam, Param, cosine_anneal, l2_normalize, l2_normalize_backward

log = logging.getLogger(__name__)

MODES = ("WEL", "WEL-equal", "WEDL", "baseline")
EPS = 1e-12
# bounds each loss's rescaling factor at 1 / SCALE_FLOOR
SCALE_FLOOR = 1e-3


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------
# loss normalization

@dataclass
class EmaState:
    means: np.ndarray
    s: float = 2.0
    k: int = 1


def init_ema(first_raw, s: float = 2.0) -> EmaState:
    return EmaState(np.maximum(np.asarray(first_raw, dtype=np.float64), EPS), s=s, k=1)


def normalize_losses(raw, ema: EmaState | None):
    """Rescale each loss by grand-mean / own-mean.  Returns ``(l_hat, scale)``.

    ``scale`` is a statistic of past batches and carries no gradient.  Means
    enter by magnitude (Proxy-NCA can average below zero) and no mean counts
    as smaller than ``SCALE_FLOOR`` times the grand mean.
    """
    if ema is None:
        raise ValueError("EMA state is not initialized")
    raw = np.asarray(raw, dtype=np.float64)
    mag = np.abs(ema.means)
    grand = mag.mean()
    scale = grand / np.maximum(mag, max(SCALE_FLOOR * grand, EPS))
    return raw * scale, scale


def ema_update(ema: EmaState, raw) -> EmaState:
    """In-place EMA step with weight s/(1+k), clamped to (0, 1]."""
    weight = min(1.0, ema.s / (1.0 + ema.k))
    ema.means = np.asarray(raw, dtype=np.float64) * weight + ema.means * (1.0 - weight)
    ema.k += 1
    return ema


# --------------------------------------------------------------------------
# coefficients, diversity, distance

def effective_weights(c, alpha: float, eta: float = 100.0, l_hat=None):
    """``w = c^2 + alpha``, penalty ``eta (sum w - 1)^2`` and d/dc of ``w.l_hat + penalty``."""
    c = np.asarray(c, dtype=np.float64)
    w = c * c + alpha
    excess = w.sum() - 1.0
    penalty = eta * excess**2
    l_hat = np.zeros_like(c) if l_hat is None else np.asarray(l_hat, dtype=np.float64)
    grad_c = 2.0 * c * l_hat + 4.0 * eta * c * excess
    return w, float(penalty), grad_c


def diversity(per_head, literal: bool = False):
    """Mean pairwise head-to-head squared distance ``D`` and hinge ``max(0, 2 - D)``.

    ``per_head`` is a sequence of M unit-normalized (N, e) matrices.  Per sample
    the squared distance is ``2 - 2 f_j.f_k`` (``2 - f_j.f_k`` when ``literal``).
    Returns ``(D, l_div, grads)`` with ``grads[j]`` = d l_div / d f_j.
    """
    M = len(per_head)
    if M < 2:
        raise ValueError("diversity needs at least two heads")
    N = per_head[0].shape[0]
    n_pairs = M * (M - 1) // 2
    dot_coef = 1.0 if literal else 2.0
    total = 0.0
    for j in range(M):
        for k in range(j + 1, M):
            total += np.mean(2.0 - dot_coef * np.sum(per_head[j] * per_head[k], axis=1))
    D = total / n_pairs
    l_div = max(0.0, 2.0 - D)
    grads = [np.zeros_like(f) for f in per_head]
    if D < 2.0:
        # d l_div / d f_j = -dD/df_j = dot_coef / (n_pairs N) * sum_{k != j} f_k
        g = dot_coef / (n_pairs * N)
        for j in range(M):
            for k in range(M):
                if k != j:
                    grads[j] += g * per_head[k]
    return float(D), float(l_div), grads


def ensemble_distance(x_embs, y_embs, weights, literal: bool = False) -> float:
    """Weighted sum of per-head squared distances between two unit-normalized samples."""
    x = np.asarray(x_embs, dtype=np.float64)
    y = np.asarray(y_embs, dtype=np.float64)
    if x.shape != y.shape or x.shape[0] != len(weights):
        raise ValueError("per-head embeddings and weights disagree in shape")
    dot_coef = 1.0 if literal else 2.0
    return float(np.sum(np.asarray(weights) * (2.0 - dot_coef * np.sum(x * y, axis=1))))


# --------------------------------------------------------------------------
# model

@dataclass
class LossSettings:
    margin: float = 0.1
    beta1: float = 2.0
    beta2: float = 0.5
    c_neg: float = 25.0
    c_mode: str = "exponent"
    gamma: float = 0.15
    proxy_lr: float = 0.01
    cls_lr: float = 0.01


def build_member(name: str, n_classes: int, e: int, rng, settings: LossSettings, base_lr: float):
    if name == "triplet":
        return L.TripletMember(settings.margin)
    if name == "binomial":
        return L.BinomialMember(settings.beta1, settings.beta2, settings.c_neg, settings.c_mode)
    if name == "proxy_nca":
        return L.ProxyNCAMember(n_classes, e, rng, lr_scale=settings.proxy_lr / base_lr)
    if name == "classification":
        return L.ClassificationMember(n_classes, e, rng, settings.gamma,
                                      lr_scale=settings.cls_lr / base_lr)
    raise ValueError(f"unknown loss {name!r}")


class EnsembleModel:
    def __init__(self, mode: str, d: int, e: int, n_classes: int,
                 loss_names=L.LOSS_NAMES, rng: np.random.Generator | None = None,
                 settings: LossSettings | None = None, base_lr: float = 1e-4,
                 embed_lr_scale: float = 10.0, eta: float = 100.0, lam: float = 0.01,
                 ema_s: float = 2.0, alpha: float | None = None, literal_distance: bool = False):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        loss_names = tuple(loss_names)
        if mode == "baseline" and len(loss_names) != 1:
            raise ValueError("baseline mode trains exactly one loss")
        if mode != "baseline" and len(loss_names) < 2:
            raise ValueError("an ensemble needs at least two losses")
        rng = np.random.default_rng() if rng is None else rng
        self.mode = mode
        self.loss_names = loss_names
        self.settings = settings or LossSettings()
        self.base_lr = base_lr
        M = len(loss_names)
        n_heads = M if mode == "WEDL" else 1
        self.heads = [EmbeddingHead(d, e, rng, lr_scale=embed_lr_scale, name=f"head{j}")
                      for j in range(n_heads)]
        self.members = [build_member(n, n_classes, e, rng, self.settings, base_lr)
                        for n in loss_names]
        self.alpha = 1.0 / (4 * M) if alpha is None else alpha
        self.eta = eta
        self.lam = lam
        self.literal_distance = literal_distance
        # start on the constraint surface with equal weights
        c0 = math.sqrt(max(1.0 / M - self.alpha, 0.0))
        self.c = Param(np.full(M, c0), name="coefficients", decay=False)
        self.ema_s = ema_s
        self.ema: EmaState | None = None

    @property
    def M(self) -> int:
        return len(self.members)

    @property
    def learns_weights(self) -> bool:
        return self.mode in ("WEL", "WEDL")

    def params(self):
        ps = [p for h in self.heads for p in h.params()]
        ps += [p for m in self.members for p in m.params()]
        if self.learns_weights:
            ps.append(self.c)
        return ps

    def weights(self) -> np.ndarray:
        if self.learns_weights:
            return effective_weights(self.c.value, self.alpha, self.eta)[0]
        return np.full(self.M, 1.0 / self.M)

    def head_for(self, j: int) -> int:
        return j if self.mode == "WEDL" else 0

    def objective(self, X, labels, update_ema: bool = True) -> dict:
        """Total loss on one batch; accumulates gradients into every Param."""
        X = np.asarray(X, dtype=np.float64)
        labels = np.asarray(labels)
        E = [h.embed(X) for h in self.heads]
        raw = np.empty(self.M)
        member_grads = []
        for j, m in enumerate(self.members):
            raw[j], gE, pgrads = m.loss_and_grad(E[self.head_for(j)], labels)
            member_grads.append((gE, pgrads))
        if self.ema is None:
            self.ema = init_ema(raw, self.ema_s)
        l_hat, scale = normalize_losses(raw, self.ema)

        if self.learns_weights:
            w, penalty, grad_c = effective_weights(self.c.value, self.alpha, self.eta, l_hat)
            self.c.grad += grad_c
        else:
            w, penalty = np.full(self.M, 1.0 / self.M), 0.0
        total = float(np.dot(w, l_hat)) + penalty

        upstream = [np.zeros_like(e) for e in E]
        for j, (m, (gE, pgrads)) in enumerate(zip(self.members, member_grads)):
            coef = w[j] * scale[j]
            upstream[self.head_for(j)] += coef * gE
            for p, g in zip(m.params(), pgrads):
                p.grad += coef * g

        D = l_div = float("nan")
        if self.mode == "WEDL":
            U = [l2_normalize(e) for e in E]
            D, l_div, gU = diversity(U, self.literal_distance)
            total += self.lam * l_div
            for j in range(self.M):
                upstream[j] += self.lam * l2_normalize_backward(E[j], gU[j])

        for h, up in zip(self.heads, upstream):
            h.embed_backward(X, up)
        if update_ema:
            ema_update(self.ema, raw)
        return {"total": total, "raw": raw, "l_hat": l_hat, "w": w, "penalty": penalty,
                "D": D, "l_div": l_div}

    def after_step(self):
        for m in self.members:
            m.after_step()

    def per_head_embeddings(self, X) -> np.ndarray:
        """Unit-normalized embeddings, shape (n_heads, N, e)."""
        return np.stack([l2_normalize(h.embed(X)) for h in self.heads])

    def distance_source(self, X) -> DistanceSource:
        U = self.per_head_embeddings(X)
        if self.mode == "WEDL":
            return DistanceSource.from_heads(U, self.weights())
        return DistanceSource.from_embedding(U[0])


# --------------------------------------------------------------------------
# training loop

@dataclass
class TrainConfig:
    epochs: int = 20
    P: int = 8
    K: int = 4
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 0.01
    weight_decay: float = 1e-4


@dataclass
class EpochRecord:
    epoch: int
    raw: list
    l_hat: list
    w: list
    D: float
    total: float
    lr: float
    steps: int
    metrics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "raw": self.raw, "l_hat": self.l_hat, "w": self.w,
                "D": self.D, "total": self.total, "lr": self.lr, "steps": self.steps,
                "metrics": self.metrics}


def _mean_or_nan(xs):
    return float(np.mean(xs)) if len(xs) and not np.all(np.isnan(xs)) else float("nan")


def train(model: EnsembleModel, data: FeatureDataset, cfg: TrainConfig,
          rng: np.random.Generator, on_epoch=None, on_step=None) -> list[EpochRecord]:
    """Mini-batch training with Adam and cosine annealing.

    ``on_epoch(record)`` may fill ``record.metrics``; ``on_step(step, info)``
    sees every batch's objective breakdown.
    """
    history: list[EpochRecord] = []
    if cfg.epochs <= 0:
        return history
    opt = Adam(model.params(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
               weight_decay=cfg.weight_decay)
    steps_per_epoch = max(1, math.ceil(len(data) / (cfg.P * cfg.K)))
    horizon = cfg.epochs * steps_per_epoch
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        raws, lhats, Ds, totals = [], [], [], []
        for b, batch in enumerate(epoch_batches(data, cfg.P, cfg.K, rng)):
            info = model.objective(batch.features, batch.labels)
            if not np.isfinite(info["total"]) or not np.all(np.isfinite(info["raw"])):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            factor = cosine_anneal(1.0, step, horizon)
            try:
                opt.step(factor)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch {b}: {exc}") from exc
            model.after_step()
            step += 1
            raws.append(info["raw"])
            lhats.append(info["l_hat"])
            Ds.append(info["D"])
            totals.append(info["total"])
            if on_step is not None:
                on_step(step, info)
        rec = EpochRecord(
            epoch=epoch,
            raw=np.mean(raws, axis=0).tolist(),
            l_hat=np.mean(lhats, axis=0).tolist(),
            w=model.weights().tolist(),
            D=_mean_or_nan(Ds),
            total=float(np.mean(totals)),
            lr=cfg.lr * cosine_anneal(1.0, step, horizon),
            steps=step,
        )
        if on_epoch is not None:
            on_epoch(rec)
        log.info("epoch %d total=%.4f w=%s", epoch, rec.total, np.round(rec.w, 3))
        history.append(rec)
    return history
