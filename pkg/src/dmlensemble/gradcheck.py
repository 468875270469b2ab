"""Finite-difference checks of every analytic gradient on random small instances."""

from __future__ import annotations

import numpy as np

from . import compressor as Cp
from . import ensemble as En
from . import losses as L
from .numcore import finite_diff_check, l2_normalize, l2_normalize_backward


def _random_batch(rng, N=None, n_classes=None):
    N = N or int(rng.integers(6, 13))
    n_classes = n_classes or int(rng.integers(2, min(4, N // 2) + 1))
    labels = np.concatenate([np.arange(n_classes), np.arange(n_classes),
                             rng.integers(0, n_classes, N - 2 * n_classes)])
    return rng.permutation(labels)


def check_triplet(rng, margin=0.5):
    N, e = int(rng.integers(6, 13)), int(rng.integers(2, 5))
    labels = _random_batch(rng, N)
    E = rng.standard_normal((N, e))
    trip = L.mine_semi_hard(l2_normalize(E), labels, margin)
    member = L.TripletMember(margin)
    return finite_diff_check(lambda: _wrap(member.loss_and_grad(E, labels, trip)), [E])


def _wrap(out):
    loss, gE, _ = out
    return loss, [gE]


def check_binomial(rng, c_mode="exponent"):
    N, e = int(rng.integers(4, 13)), int(rng.integers(2, 5))
    labels = _random_batch(rng, N)
    E = rng.standard_normal((N, e))
    member = L.BinomialMember(c_mode=c_mode)
    return finite_diff_check(lambda: _wrap(member.loss_and_grad(E, labels)), [E])


def check_proxy_nca(rng):
    N, e = int(rng.integers(4, 13)), int(rng.integers(2, 5))
    C = int(rng.integers(2, 6))
    labels = rng.integers(0, C, N)
    E = rng.standard_normal((N, e))
    P = rng.standard_normal((C, e))

    def fn():
        loss, gU, gP = L.proxy_nca(l2_normalize(E), labels, P)
        return loss, [l2_normalize_backward(E, gU), gP]

    return finite_diff_check(fn, [E, P])


def check_classification(rng):
    N, e = int(rng.integers(4, 13)), int(rng.integers(2, 5))
    C = int(rng.integers(2, 6))
    labels = rng.integers(0, C, N)
    E = rng.standard_normal((N, e))
    W = rng.standard_normal((e, C))
    b = rng.standard_normal(C)

    def fn():
        loss, gE, gW, gb = L.smoothed_ce(E, labels, W, b, 0.15)
        return loss, [gE, gW, gb]

    return finite_diff_check(fn, [E, W, b])


def check_diversity(rng):
    M, N, e = int(rng.integers(2, 5)), int(rng.integers(2, 13)), int(rng.integers(2, 5))
    base = rng.standard_normal((N, e))
    # keep heads correlated so D stays below the hinge at 2
    E = [base + 0.3 * rng.standard_normal((N, e)) for _ in range(M)]

    def fn():
        _, l_div, gU = En.diversity([l2_normalize(x) for x in E])
        return l_div, [l2_normalize_backward(x, g) for x, g in zip(E, gU)]

    return finite_diff_check(fn, E)


def check_objective(rng, mode="WEDL"):
    d, e = int(rng.integers(2, 9)), int(rng.integers(2, 5))
    labels = _random_batch(rng, n_classes=3)
    X = rng.standard_normal((len(labels), d))
    model = En.EnsembleModel(mode, d, e, 3, rng=rng, lam=1.0)
    model.c.value += 0.1 * rng.standard_normal(model.M)
    # feed one batch so the EMA holds distinct per-loss means
    model.objective(X, labels)
    model.objective(rng.standard_normal(X.shape), labels)
    params = model.params()
    # mining is a discrete selection; hold it fixed while perturbing
    triplet = model.members[0]
    trips = L.mine_semi_hard(l2_normalize(model.heads[0].embed(X)), labels, triplet.margin)
    mined = triplet.loss_and_grad
    triplet.loss_and_grad = lambda E, y: mined(E, y, trips)

    def fn():
        for p in params:
            p.zero_grad()
        info = model.objective(X, labels, update_ema=False)
        return info["total"], [p.grad.copy() for p in params]

    try:
        return finite_diff_check(fn, [p.value for p in params])
    finally:
        del triplet.loss_and_grad
        for p in params:
            p.zero_grad()


def check_compressor(rng):
    M, e, N = int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(3, 13))
    U = l2_normalize(rng.standard_normal((M, N, e)))
    w = rng.uniform(0.1, 0.5, M)
    F = Cp.concat_weighted(U, w)
    K = Cp.normalized_distance_matrix(F)
    reg = Cp.CompressionRegressor(M * e, e, rng)
    reg.A.value *= 3.0
    reg.b.value[:] = 0.1 * rng.standard_normal(e)

    def fn():
        for p in reg.params():
            p.zero_grad()
        loss = Cp.compressor_loss(reg, F, K)
        return loss, [p.grad.copy() for p in reg.params()]

    return finite_diff_check(fn, [p.value for p in reg.params()])


CHECKS = {
    "triplet": check_triplet,
    "binomial": check_binomial,
    "proxy_nca": check_proxy_nca,
    "classification": check_classification,
    "diversity": check_diversity,
    "objective[WEL]": lambda rng: check_objective(rng, "WEL"),
    "objective[WEL-equal]": lambda rng: check_objective(rng, "WEL-equal"),
    "objective[WEDL]": lambda rng: check_objective(rng, "WEDL"),
    "compressor": check_compressor,
}


def run_gradchecks(instances: int = 20, seed: int = 0) -> dict:
    """Worst relative error per check over ``instances`` random problems."""
    rng = np.random.default_rng(seed)
    return {name: max(fn(rng) for _ in range(instances)) for name, fn in CHECKS.items()}
