"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are repeated in pytest's terminal summary; ``python tests/test_acceptance.py``
runs the criteria without pytest.
"""

import math
import sys
import time
from collections import Counter

import numpy as np
import pytest
from scipy.stats import spearmanr

from dmlensemble.compressor import (
    CompressionRegressor,
    concat_weighted,
    distance_loss,
    normalized_distance_matrix,
    train_compressor,
)
from dmlensemble.ensemble import (
    EnsembleModel,
    TrainConfig,
    diversity,
    ema_update,
    ensemble_distance,
    init_ema,
    normalize_losses,
    train,
)
from dmlensemble.evalkit import DistanceSource, knn_accuracy, nmi, recall_at_k
from dmlensemble.featstore import FeatureDataset, synth_gaussians
from dmlensemble.gradcheck import run_gradchecks
from dmlensemble.losses import binomial_deviance, proxy_nca, smoothed_targets, triplet_hinge
from dmlensemble.numcore import l2_normalize
from dmlensemble.runner import RunConfig, build_model, load_dataset, run, zsl_split


SUMMARY: dict = {}  # printed at the end of the pytest run by conftest.py


def _report(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    SUMMARY[n] = line
    print(line)
    return ok


# --------------------------------------------------------------------------
# 1. gradients

def criterion_1():
    t = time.perf_counter()
    errs = run_gradchecks(instances=20, seed=0)
    elapsed = time.perf_counter() - t
    worst = max(errs.values())
    required = {"triplet", "binomial", "proxy_nca", "classification", "diversity",
                "objective[WEDL]", "compressor"}
    ok = worst <= 1e-4 and elapsed < 30 and required <= set(errs)
    return ok, f"max rel err {worst:.2e} over {sorted(errs)} in {elapsed:.1f}s"


# 2. closed-form spot values

def criterion_2():
    checks = {}
    # squared distances 0.3 (positive) and 0.2 (negative)
    emb = np.array([[0.0, 0.0], [math.sqrt(0.3), 0.0], [0.0, math.sqrt(0.2)]])
    checks["triplet"] = abs(triplet_hinge(emb, np.array([[0, 1, 2]]), 0.1)[0] - 0.2) <= 1e-12
    s = 0.54
    pair = np.array([[1.0, 0.0], [s, math.sqrt(1 - s * s)]])
    val = binomial_deviance(pair, np.array([[0, 1, 0]]), beta1=2.0, beta2=0.5, c_neg=25.0)[0]
    checks["binomial"] = abs(val - math.log1p(math.e**2)) <= 1e-6
    val = proxy_nca(np.array([[1.0, 0.0]]), np.array([0]), np.eye(2))[0]
    checks["proxy_nca"] = abs(val + 2.0) <= 1e-9
    checks["smoothed_ce"] = smoothed_targets(np.array([0]), 2, 0.15).tolist() == [[0.925, 0.075]]
    return all(checks.values()), ", ".join(f"{k}={'ok' if v else 'BAD'}" for k, v in checks.items())


# 3. EMA equalization

def criterion_3():
    raw = np.array([10.0, 0.1])
    ema = init_ema(raw)
    for _ in range(100):
        l_hat, _ = normalize_losses(raw, ema)
        ema_update(ema, raw)
    gap = abs(l_hat[0] - l_hat[1]) / l_hat.mean()
    return gap <= 1e-2, f"|l1-l2|/mean = {gap:.2e} after 100 steps"


# 4. constraint adherence

def criterion_4():
    cfg = RunConfig.from_dict(_c9_config("WEDL", seed=0))
    rngs = {k: np.random.default_rng(s)
            for k, s in zip(("data", "init", "train", "compress"),
                            np.random.SeedSequence(cfg.seed).spawn(4))}
    split = zsl_split(load_dataset(cfg))
    model = build_model(cfg, split.train.dim, split.train.class_count, rngs["init"])
    worst_sum, min_margin, steps = 0.0, np.inf, 0

    def on_step(step, info):
        nonlocal worst_sum, min_margin, steps
        steps = step
        w = model.weights()
        min_margin = min(min_margin, float(np.min(w - model.alpha)))
        if step >= 200:
            worst_sum = max(worst_sum, abs(w.sum() - 1.0))

    train(model, split.train, cfg.train_config(), rngs["train"], on_step=on_step)
    ok = steps >= 400 and worst_sum <= 0.05 and min_margin >= 0.0
    return ok, (f"max |sum w - 1| = {worst_sum:.2e} over steps 200..{steps}; "
                f"min(w - alpha) = {min_margin:.2e}")


# 5. diversity boundaries

def criterion_5():
    u = l2_normalize(np.random.default_rng(0).standard_normal((6, 4)))
    same = diversity([u, u.copy(), u.copy()])[1]
    eye = np.eye(3)
    ortho = diversity([np.tile(eye[i], (5, 1)) for i in range(3)])[1]
    anti = diversity([u, -u])[1]
    ok = same == 2.0 and ortho == 0.0 and anti == 0.0
    return ok, f"identical={same}, orthogonal={ortho}, antipodal={anti}"


# 6. concatenation identity

def criterion_6():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(50):
        M, e = int(rng.integers(2, 6)), int(rng.integers(2, 17))
        x = l2_normalize(rng.standard_normal((M, e)))
        y = l2_normalize(rng.standard_normal((M, e)))
        w = rng.dirichlet(np.ones(M)) + 1e-3
        diff = concat_weighted(x, w) - concat_weighted(y, w)
        worst = max(worst, abs(float(diff @ diff) - ensemble_distance(x, y, w)))
    return worst <= 1e-10, f"max |difference| = {worst:.1e} on 50 pairs"


# 7. compression fidelity

def criterion_7():
    t = time.perf_counter()
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(7).spawn(4)]
    ds = synth_gaussians(5, 60, 16, 3.0, "tanh-mix", rngs[0])
    order = rngs[0].permutation(len(ds))
    fit, held = order[:200], order[200:]
    train_ds = FeatureDataset(ds.features[fit], ds.labels[fit])
    model = EnsembleModel("WEDL", ds.dim, 8, ds.class_count, rng=rngs[1], base_lr=1e-3)
    assert model.M == 4
    train(model, train_ds, TrainConfig(epochs=10, P=5, K=4, lr=1e-3), rngs[2])

    F = concat_weighted(model.per_head_embeddings(ds.features[held]), model.weights())
    K = normalized_distance_matrix(F)
    reg = CompressionRegressor(F.shape[1], 8, rngs[3])
    before = distance_loss(K, normalized_distance_matrix(reg.compress(F)))[0]
    train_compressor(model, train_ds, epochs=50, P=5, K=4, rng=rngs[3], reg=reg)
    K2 = normalized_distance_matrix(reg.compress(F))
    after = distance_loss(K, K2)[0]
    iu = np.triu_indices(len(F), 1)
    rho = spearmanr(K[iu], K2[iu]).statistic
    elapsed = time.perf_counter() - t
    ok = after <= 0.5 * before and rho >= 0.95 and elapsed < 120
    return ok, (f"held-out l_dist ratio {after / before:.3f}, Spearman {rho:.4f}, "
                f"{elapsed:.1f}s")


# 8. metric oracles

def _nn(X, i, k):
    d = sorted((float(np.sum((X[i] - X[j]) ** 2)), j) for j in range(len(X)) if j != i)
    return [j for _, j in d[:k]]


def _oracle_recall(X, y, k):
    return sum(any(y[j] == y[i] for j in _nn(X, i, k)) for i in range(len(X))) / len(X)


def _oracle_knn(X, y, k):
    return sum(sum(y[j] == y[i] for j in _nn(X, i, k)) >= math.ceil(k / 2)
               for i in range(len(X))) / len(X)


def _oracle_nmi(a, b):
    n = len(a)
    ca, cb, cab = Counter(a), Counter(b), Counter(zip(a, b))
    H = lambda c: -sum(v / n * math.log(v / n) for v in c.values())
    mi = sum(v / n * math.log(v * n / (ca[p] * cb[q])) for (p, q), v in cab.items())
    return 2 * mi / (H(ca) + H(cb))


def criterion_8():
    rng = np.random.default_rng(8)
    problems = []
    for inst in range(10):
        N = int(rng.integers(10, 51))
        X = rng.standard_normal((N, 3))
        y = rng.integers(0, 4, N)
        pred = rng.integers(0, 5, N)
        src = DistanceSource.from_embedding(X)
        recalls = []
        for k in (1, 2, 4, 8):
            r = recall_at_k(src, y, k)
            recalls.append(r)
            if r != _oracle_recall(X, y, k):
                problems.append(f"recall@{k} #{inst}")
            if knn_accuracy(src, y, k) != _oracle_knn(X, y, k):
                problems.append(f"knn@{k} #{inst}")
        if recalls != sorted(recalls):
            problems.append(f"recall not monotone #{inst}")
        # contingency sums in a different order can differ in the last ulp
        if abs(nmi(pred, y) - _oracle_nmi(list(pred), list(y))) > 1e-12:
            problems.append(f"nmi #{inst}")
        if abs(nmi(y, y) - 1.0) > 1e-9 or abs(nmi((y + 3) * 7, y) - 1.0) > 1e-9:
            problems.append(f"perfect nmi #{inst}")
    return not problems, "all oracles agree on 10 instances" if not problems else str(problems)


# 9. directional ensemble benefit

C9_SEEDS = (0, 1, 2, 3, 4)
C9_BASELINES = ("triplet", "binomial", "proxy_nca", "classification")


def _c9_config(mode, seed, **extra):
    return {"dataset": {"synthetic": {"classes": 40, "per_class": 50, "d": 32, "sep": 4.0,
                                      "warp": "tanh-mix"}},
            "mode": mode, "seed": seed, "embed_dim": 16, "epochs": 20, "lr": 1e-3,
            "eval_every_epoch": False, **extra}


def criterion_9():
    t = time.perf_counter()
    r1 = {name: [] for name in [*C9_BASELINES, "WEL-equal", "WEDL", "WEDL-C"]}
    for seed in C9_SEEDS:
        for loss in C9_BASELINES:
            rep, _, _ = run(RunConfig.from_dict(_c9_config(f"baseline:{loss}", seed)))
            r1[loss].append(rep.metrics["ensemble"]["recall"]["1"])
        rep, _, _ = run(RunConfig.from_dict(_c9_config("WEL-equal", seed)))
        r1["WEL-equal"].append(rep.metrics["ensemble"]["recall"]["1"])
        rep, _, _ = run(RunConfig.from_dict(_c9_config("WEDL", seed, compress=True)))
        r1["WEDL"].append(rep.metrics["ensemble"]["recall"]["1"])
        r1["WEDL-C"].append(rep.metrics["compressed"]["recall"]["1"])
    mean = {k: float(np.mean(v)) for k, v in r1.items()}
    best = max(C9_BASELINES, key=mean.get)
    elapsed = time.perf_counter() - t
    ok = (mean["WEDL"] >= mean[best] - 0.02 and mean["WEDL-C"] >= mean["WEL-equal"] - 0.02
          and elapsed < 600)
    summary = ", ".join(f"{k}={v:.4f}" for k, v in mean.items())
    return ok, (f"R@1 means over {len(C9_SEEDS)} seeds: {summary}; best baseline {best}; "
                f"{elapsed:.0f}s")


# 10. determinism

def criterion_10(tmp_path):
    raw = {"dataset": {"synthetic": {"classes": 16, "per_class": 12, "d": 12}},
           "embed_dim": 8, "epochs": 3, "lr": 1e-3, "compress": True, "compressor_epochs": 3,
           "seed": 10}
    for name in ("a", "b"):
        run(RunConfig.from_dict(raw), tmp_path / name)
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("report.json", "model.ckpt")}
    return all(same.values()), ", ".join(f"{f} {'identical' if v else 'DIFFERS'}"
                                         for f, v in same.items())


# --------------------------------------------------------------------------

@pytest.mark.parametrize("n", range(1, 11))
def test_criterion(n, tmp_path):
    fn = globals()[f"criterion_{n}"]
    ok, detail = fn(tmp_path) if n == 10 else fn()
    _report(n, ok, detail)
    assert ok, detail


if __name__ == "__main__":
    import tempfile
    from pathlib import Path

    results = []
    for n in range(1, 11):
        fn = globals()[f"criterion_{n}"]
        if n == 10:
            with tempfile.TemporaryDirectory() as d:
                results.append(_report(n, *fn(Path(d))))
        else:
            results.append(_report(n, *fn()))
    sys.exit(0 if all(results) else 1)
