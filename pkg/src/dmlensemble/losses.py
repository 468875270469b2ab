"""The four metric-learning losses with analytic gradients, plus tuple samplers.

Functional kernels take embeddings that are already unit-normalized (except
``smoothed_ce``, which consumes raw head outputs).  The ``*Member`` classes
wrap a kernel with its own normalization and parameters so the ensemble can
treat every loss the same way.
"""

from __future__ import annotations

import math

import numpy as np

from .numcore import Param, l2_normalize, l2_normalize_backward

LOSS_NAMES = ("triplet", "binomial", "proxy_nca", "classification")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softplus(z):
    return np.logaddexp(0.0, z)


def pairwise_sqdist(X: np.ndarray, Y: np.ndarray | None = None) -> np.ndarray:
    Y = X if Y is None else Y
    D = np.sum(X * X, axis=1)[:, None] + np.sum(Y * Y, axis=1)[None, :] - 2.0 * X @ Y.T
    np.maximum(D, 0.0, out=D)
    if Y is X:
        np.fill_diagonal(D, 0.0)
    return D


# --------------------------------------------------------------------------
# tuple sampling

def mine_semi_hard(emb: np.ndarray, labels: np.ndarray, margin: float) -> np.ndarray:
    """Semi-hard negatives for every ordered anchor/positive pair.

    Returns an int array of shape (T, 3) holding (anchor, positive, negative).
    Pairs for which no negative lies farther than the positive are dropped.
    """
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    if not same.any() or len(np.unique(labels)) < 2:
        raise ValueError("batch has no valid anchor/positive pair with a negative")
    D = pairwise_sqdist(emb)
    out = []
    for a in range(len(labels)):
        pos = np.flatnonzero(same[a])
        if not len(pos):
            continue
        neg = np.flatnonzero(labels != labels[a])
        dn = D[a, neg]
        for p in pos:
            dp = D[a, p]
            band = (dn > dp) & (dn < dp + margin)
            if band.any():
                cand = np.where(band, dn, np.inf)
            else:
                cand = np.where(dn > dp, dn, np.inf)
            j = int(np.argmin(cand))
            if np.isfinite(cand[j]):
                out.append((a, p, neg[j]))
    return np.array(out, dtype=np.int64).reshape(-1, 3)


def enumerate_pairs(labels) -> np.ndarray:
    """All unordered pairs (i, j, similar) with i < j; ``similar`` is 1 or 0."""
    labels = np.asarray(labels)
    if len(labels) < 2:
        raise ValueError("need at least two samples to form a pair")
    i, j = np.triu_indices(len(labels), k=1)
    return np.stack([i, j, (labels[i] == labels[j]).astype(np.int64)], axis=1)


# --------------------------------------------------------------------------
# loss kernels

def triplet_hinge(emb: np.ndarray, triplets: np.ndarray, margin: float = 0.1):
    """Mean hinge ``[margin - (d_neg - d_pos)]_+`` over triplets, squared distances.

    An empty triplet set yields ``(0.0, zeros)``.
    """
    grad = np.zeros_like(emb)
    if len(triplets) == 0:
        return 0.0, grad
    a, p, n = triplets.T
    diff_p = emb[a] - emb[p]
    diff_n = emb[a] - emb[n]
    hinge = margin - (np.sum(diff_n**2, axis=1) - np.sum(diff_p**2, axis=1))
    active = hinge > 0
    loss = float(np.sum(np.where(active, hinge, 0.0)) / len(triplets))
    coef = active[:, None] * (2.0 / len(triplets))
    np.add.at(grad, a, coef * (diff_p - diff_n))
    np.add.at(grad, p, -coef * diff_p)
    np.add.at(grad, n, coef * diff_n)
    return loss, grad


def binomial_deviance(emb: np.ndarray, pairs: np.ndarray, beta1: float = 2.0,
                      beta2: float = 0.5, c_neg: float = 25.0, c_mode: str = "exponent"):
    """Binomial deviance on cosine similarities; mean over positives plus mean over negatives.

    ``c_mode="exponent"`` puts ``c_neg`` inside the exponent of the negative
    branch, ``"multiplier"`` scales the negative branch's softplus by it.
    """
    if c_mode not in ("exponent", "multiplier"):
        raise ValueError(f"unknown c_mode {c_mode!r}")
    grad = np.zeros_like(emb)
    if len(pairs) == 0:
        return 0.0, grad
    i, j, sim = pairs.T
    s = np.sum(emb[i] * emb[j], axis=1)
    pos = sim == 1
    dl_ds = np.zeros_like(s)
    loss = 0.0
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos:
        z = -beta1 * (s[pos] - beta2)
        loss += float(np.mean(_softplus(z)))
        dl_ds[pos] = -beta1 * _sigmoid(z) / n_pos
    if n_neg:
        if c_mode == "exponent":
            z = beta1 * (s[~pos] - beta2) * c_neg
            loss += float(np.mean(_softplus(z)))
            dl_ds[~pos] = beta1 * c_neg * _sigmoid(z) / n_neg
        else:
            z = beta1 * (s[~pos] - beta2)
            loss += float(c_neg * np.mean(_softplus(z)))
            dl_ds[~pos] = c_neg * beta1 * _sigmoid(z) / n_neg
    np.add.at(grad, i, dl_ds[:, None] * emb[j])
    np.add.at(grad, j, dl_ds[:, None] * emb[i])
    return loss, grad


def proxy_nca_from_distances(dist: np.ndarray, labels: np.ndarray):
    """Proxy-NCA from an (N, C) distance table.

    Returns ``(loss, grad_dist)``.  The denominator runs over the other
    classes only, so the loss can go negative.
    """
    N, C = dist.shape
    if C < 2:
        raise ValueError("Proxy-NCA needs at least two proxies")
    rows = np.arange(N)
    neg = -dist.copy()
    neg[rows, labels] = -np.inf
    mx = neg.max(axis=1, keepdims=True)
    ex = np.exp(neg - mx)
    z = ex.sum(axis=1, keepdims=True)
    lse = (mx + np.log(z))[:, 0]
    loss = float(np.mean(dist[rows, labels] + lse))
    grad = -(ex / z) / N
    grad[rows, labels] = 1.0 / N
    return loss, grad


def proxy_nca(emb: np.ndarray, labels: np.ndarray, proxies: np.ndarray):
    """Proxy-NCA with one proxy per class and squared Euclidean distance.

    ``proxies`` are raw rows; they are unit-normalized here and the returned
    proxy gradient is taken w.r.t. the raw rows.
    Returns ``(loss, grad_emb, grad_proxies)``.
    """
    labels = np.asarray(labels)
    if labels.max() >= len(proxies) or labels.min() < 0:
        raise ValueError("a batch label has no proxy")
    q = l2_normalize(proxies)
    dist = pairwise_sqdist(emb, q)
    loss, G = proxy_nca_from_distances(dist, labels)
    # d_ic = |u_i|^2 + |q_c|^2 - 2 u_i.q_c
    grad_emb = 2.0 * (G.sum(axis=1, keepdims=True) * emb - G @ q)
    grad_q = 2.0 * (G.sum(axis=0)[:, None] * q - G.T @ emb)
    return loss, grad_emb, l2_normalize_backward(proxies, grad_q)


def smoothed_targets(labels: np.ndarray, n_classes: int, gamma: float) -> np.ndarray:
    T = np.full((len(labels), n_classes), gamma / n_classes)
    # 1 - gamma (1 - 1/C) rounds better than (1 - gamma) + gamma/C
    T[np.arange(len(labels)), labels] = 1.0 - gamma * (1.0 - 1.0 / n_classes)
    return T


def smoothed_ce(emb: np.ndarray, labels: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                gamma: float = 0.15):
    """Label-smoothed softmax cross-entropy on raw embeddings.

    Returns ``(loss, grad_emb, grad_weight, grad_bias)``.
    """
    labels = np.asarray(labels)
    C = weight.shape[1]
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels must lie in [0, {C})")
    logits = emb @ weight + bias
    logits = logits - logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    T = smoothed_targets(labels, C, gamma)
    N = len(labels)
    loss = float(-np.sum(T * logp) / N)
    g = (np.exp(logp) - T) / N
    return loss, g @ weight.T, emb.T @ g, g.sum(axis=0)


# --------------------------------------------------------------------------
# ensemble members

class LossMember:
    """Common surface: ``loss_and_grad(E, labels) -> (loss, grad_E, param_grads)``."""

    name = "member"

    def params(self):
        return []

    def after_step(self):
        pass


class TripletMember(LossMember):
    name = "triplet"

    def __init__(self, margin: float = 0.1):
        self.margin = margin
        self.empty_batches = 0

    def loss_and_grad(self, E, labels, triplets=None):
        U = l2_normalize(E)
        if triplets is None:
            triplets = mine_semi_hard(U, labels, self.margin)
        if len(triplets) == 0:
            self.empty_batches += 1
        loss, gU = triplet_hinge(U, triplets, self.margin)
        return loss, l2_normalize_backward(E, gU), []


class BinomialMember(LossMember):
    name = "binomial"

    def __init__(self, beta1=2.0, beta2=0.5, c_neg=25.0, c_mode="exponent"):
        self.beta1, self.beta2, self.c_neg, self.c_mode = beta1, beta2, c_neg, c_mode

    def loss_and_grad(self, E, labels):
        U = l2_normalize(E)
        loss, gU = binomial_deviance(U, enumerate_pairs(labels), self.beta1, self.beta2,
                                     self.c_neg, self.c_mode)
        return loss, l2_normalize_backward(E, gU), []


class ProxyNCAMember(LossMember):
    name = "proxy_nca"

    def __init__(self, n_classes: int, e: int, rng: np.random.Generator, lr_scale: float = 1.0):
        if n_classes < 2:
            raise ValueError("Proxy-NCA needs at least two training classes")
        self.proxies = Param(l2_normalize(rng.standard_normal((n_classes, e))),
                             name="proxy_nca.proxies", lr_scale=lr_scale, decay=False)

    def params(self):
        return [self.proxies]

    def loss_and_grad(self, E, labels):
        U = l2_normalize(E)
        loss, gU, gP = proxy_nca(U, labels, self.proxies.value)
        return loss, l2_normalize_backward(E, gU), [gP]

    def after_step(self):
        self.proxies.value[:] = l2_normalize(self.proxies.value)


class ClassificationMember(LossMember):
    name = "classification"

    def __init__(self, n_classes: int, e: int, rng: np.random.Generator, gamma: float = 0.15,
                 lr_scale: float = 1.0):
        bound = 1.0 / math.sqrt(e)
        self.gamma = gamma
        self.weight = Param(rng.uniform(-bound, bound, size=(e, n_classes)),
                            name="classification.weight", lr_scale=lr_scale)
        self.bias = Param(np.zeros(n_classes), name="classification.bias", lr_scale=lr_scale,
                          decay=False)

    def params(self):
        return [self.weight, self.bias]

    def loss_and_grad(self, E, labels):
        loss, gE, gW, gb = smoothed_ce(E, labels, self.weight.value, self.bias.value, self.gamma)
        return loss, gE, [gW, gb]
