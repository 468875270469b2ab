"""Experiment orchestration, checkpoints and the ``dmlensemble`` command line.

Config files are JSON.  Only ``dataset``, ``mode`` and ``seed`` are needed;
every other key falls back to the defaults in :class:`RunConfig`.  ``dataset``
is either ``{"path": "...", "format": "csv"|"bin"}`` or
``{"synthetic": {"classes": .., "per_class": .., "d": .., "sep": .., "warp": ..}}``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import compressor as Cp
from . import ensemble as En
from .evalkit import DistanceSource, evaluate
from .featstore import FeatureDataset, load_features, save_features, synth_gaussians, zsl_split
from .losses import LOSS_NAMES

log = logging.getLogger(__name__)

CKPT_MAGIC = b"WEDL"
CKPT_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


@dataclass
class RunConfig:
    dataset: dict
    mode: str = "WEDL"
    seed: int = 0
    losses: list = field(default_factory=lambda: list(LOSS_NAMES))
    embed_dim: int = 64
    epochs: int = 20
    batch_classes: int = 8
    batch_per_class: int = 4
    lr: float = 1e-4
    embed_lr_scale: float = 10.0
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    adam_eps: float = 0.01
    weight_decay: float = 1e-4
    margin: float = 0.1
    beta1: float = 2.0
    beta2: float = 0.5
    c_neg: float = 25.0
    binomial_c_mode: str = "exponent"
    gamma: float = 0.15
    proxy_lr: float = 0.01
    cls_lr: float = 0.01
    diversity_lambda: float = 0.01
    ema_s: float = 2.0
    eta: float = 100.0
    alpha: float | None = None
    literal_distance: bool = False
    eval_every_epoch: bool = True
    eval_seed: int = 0
    compress: bool = False
    compressor_epochs: int = 30
    compressor_lr: float = 1e-3
    compressor_eps: float = 1e-8

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        problems = [f"unknown key {k!r}" for k in raw if k not in names]
        if "dataset" not in raw:
            problems.append("missing required key 'dataset'")
        if problems:
            raise ConfigError(problems)
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def model_mode(self) -> str:
        return "baseline" if self.mode.startswith("baseline:") else self.mode

    @property
    def loss_names(self) -> list:
        if self.mode.startswith("baseline:"):
            return [self.mode.split(":", 1)[1]]
        return list(self.losses)

    def validate(self):
        p = []
        ds = self.dataset
        if not isinstance(ds, dict) or not (("path" in ds) ^ ("synthetic" in ds)):
            p.append("dataset must hold exactly one of 'path' or 'synthetic'")
        elif "path" in ds:
            if ds.get("format", "csv") not in ("csv", "bin"):
                p.append("dataset.format must be 'csv' or 'bin'")
        else:
            syn = ds["synthetic"]
            allowed = {"classes", "per_class", "d", "sep", "warp"}
            if not isinstance(syn, dict) or set(syn) - allowed:
                p.append(f"dataset.synthetic accepts only {sorted(allowed)}")
            else:
                if syn.get("classes", 40) < 2 or syn.get("per_class", 50) < 2:
                    p.append("dataset.synthetic needs classes >= 2 and per_class >= 2")
                if syn.get("d", 32) < 1:
                    p.append("dataset.synthetic.d must be >= 1")
                if syn.get("sep", 3.0) < 0:
                    p.append("dataset.synthetic.sep must be non-negative")
                if syn.get("warp", "tanh-mix") not in ("none", "tanh-mix"):
                    p.append("dataset.synthetic.warp must be 'none' or 'tanh-mix'")
        if self.mode.startswith("baseline:"):
            if self.mode.split(":", 1)[1] not in LOSS_NAMES:
                p.append(f"baseline loss must be one of {LOSS_NAMES}")
        elif self.mode not in ("WEL", "WEL-equal", "WEDL"):
            p.append("mode must be WEL, WEL-equal, WEDL or baseline:<loss>")
        if len(self.losses) < 2 or any(n not in LOSS_NAMES for n in self.losses):
            p.append(f"losses must list at least two of {LOSS_NAMES}")
        elif len(set(self.losses)) != len(self.losses):
            p.append("losses must not repeat")
        if not isinstance(self.seed, int) or self.seed < 0:
            p.append("seed must be a non-negative integer")
        for name in ("embed_dim", "batch_classes", "batch_per_class"):
            if getattr(self, name) < (1 if name == "embed_dim" else 2):
                p.append(f"{name} is too small")
        for name in ("epochs", "compressor_epochs"):
            if getattr(self, name) < 0:
                p.append(f"{name} must be >= 0")
        for name in ("lr", "embed_lr_scale", "adam_eps", "proxy_lr", "cls_lr", "ema_s",
                     "compressor_lr", "compressor_eps", "beta1"):
            if not getattr(self, name) > 0:
                p.append(f"{name} must be positive")
        for name in ("weight_decay", "margin", "c_neg", "diversity_lambda", "eta"):
            if getattr(self, name) < 0:
                p.append(f"{name} must be non-negative")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            p.append("betas must be two numbers in [0, 1)")
        if not 0 <= self.gamma < 1:
            p.append("gamma must lie in [0, 1)")
        if self.binomial_c_mode not in ("exponent", "multiplier"):
            p.append("binomial_c_mode must be 'exponent' or 'multiplier'")
        if self.alpha is not None and not 0 < self.alpha * len(self.loss_names) < 1:
            p.append("alpha must satisfy 0 < M*alpha < 1")
        if self.compress and self.mode != "WEDL":
            p.append("compress requires mode WEDL")
        if p:
            raise ConfigError(p)

    def loss_settings(self) -> En.LossSettings:
        return En.LossSettings(margin=self.margin, beta1=self.beta1, beta2=self.beta2,
                               c_neg=self.c_neg, c_mode=self.binomial_c_mode, gamma=self.gamma,
                               proxy_lr=self.proxy_lr, cls_lr=self.cls_lr)

    def train_config(self) -> En.TrainConfig:
        return En.TrainConfig(epochs=self.epochs, P=self.batch_classes, K=self.batch_per_class,
                              lr=self.lr, betas=tuple(self.betas), eps=self.adam_eps,
                              weight_decay=self.weight_decay)


def load_config(path) -> RunConfig:
    return RunConfig.from_dict(json.loads(Path(path).read_text()))


def _rngs(seed: int):
    data, init, train, comp = np.random.SeedSequence(seed).spawn(4)
    return {k: np.random.default_rng(s) for k, s in
            zip(("data", "init", "train", "compress"), (data, init, train, comp))}


def load_dataset(cfg: RunConfig) -> FeatureDataset:
    ds = cfg.dataset
    if "path" in ds:
        return load_features(ds["path"], ds.get("format", "csv"))
    syn = {"classes": 40, "per_class": 50, "d": 32, "sep": 3.0, "warp": "tanh-mix"}
    syn.update(ds["synthetic"])
    return synth_gaussians(syn["classes"], syn["per_class"], syn["d"], syn["sep"], syn["warp"],
                           rng=_rngs(cfg.seed)["data"])


def build_model(cfg: RunConfig, d: int, n_classes: int, rng) -> En.EnsembleModel:
    return En.EnsembleModel(cfg.model_mode, d, cfg.embed_dim, n_classes,
                            loss_names=cfg.loss_names, rng=rng, settings=cfg.loss_settings(),
                            base_lr=cfg.lr, embed_lr_scale=cfg.embed_lr_scale, eta=cfg.eta,
                            lam=cfg.diversity_lambda, ema_s=cfg.ema_s, alpha=cfg.alpha,
                            literal_distance=cfg.literal_distance)


# --------------------------------------------------------------------------
# checkpoints
#
# layout (all little-endian):
#   b"WEDL" | u8 version | u32 header length | header JSON (utf-8)
#   u32 block count, then per block:
#   u16 name length | name | u8 ndim | u32 dims[ndim] | f64 values (row-major)
# block order: head W's, loss-member params in loss order, coefficients,
# ema.means, ema.k, then regressor.A and regressor.b when present.

def _model_blocks(model: En.EnsembleModel, reg: Cp.CompressionRegressor | None):
    blocks = [(p.name, p.value) for h in model.heads for p in h.params()]
    blocks += [(p.name, p.value) for m in model.members for p in m.params()]
    blocks.append((model.c.name, model.c.value))
    if model.ema is not None:
        blocks.append(("ema.means", model.ema.means))
        blocks.append(("ema.k", np.array([float(model.ema.k)])))
    if reg is not None:
        blocks += [(p.name, p.value) for p in reg.params()]
    return blocks


def save_checkpoint(path, model: En.EnsembleModel, reg: Cp.CompressionRegressor | None = None,
                    config: RunConfig | None = None):
    n_classes = next((m.proxies.value.shape[0] for m in model.members if hasattr(m, "proxies")),
                     None)
    if n_classes is None:
        n_classes = next((m.weight.value.shape[1] for m in model.members
                          if hasattr(m, "weight")), 2)
    header = {
        "mode": model.mode, "losses": list(model.loss_names),
        "d": model.heads[0].d, "e": model.heads[0].e, "n_classes": int(n_classes),
        "alpha": model.alpha, "eta": model.eta, "lambda": model.lam, "ema_s": model.ema_s,
        "literal_distance": model.literal_distance, "base_lr": model.base_lr,
        "embed_lr_scale": model.heads[0].W.lr_scale,
        "settings": dataclasses.asdict(model.settings),
        "config_hash": config.config_hash() if config else None,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<BI", CKPT_VERSION, len(hb)) + hb
    blocks = _model_blocks(model, reg)
    out += struct.pack("<I", len(blocks))
    for name, arr in blocks:
        nb = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path):
    """Rebuild ``(model, regressor_or_None)`` from a checkpoint file."""
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, hlen = struct.unpack_from("<BI", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 9
    header = json.loads(blob[pos:pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    blocks = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        blocks[name] = np.frombuffer(blob, "<f8", size, pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    model = En.EnsembleModel(header["mode"], header["d"], header["e"], header["n_classes"],
                             loss_names=header["losses"], rng=np.random.default_rng(0),
                             settings=En.LossSettings(**header["settings"]),
                             base_lr=header["base_lr"], embed_lr_scale=header["embed_lr_scale"],
                             eta=header["eta"], lam=header["lambda"], ema_s=header["ema_s"],
                             alpha=header["alpha"], literal_distance=header["literal_distance"])
    params = {p.name: p for p in model.params()}
    params[model.c.name] = model.c
    for name, p in params.items():
        p.value[...] = blocks[name]
    if "ema.means" in blocks:
        model.ema = En.EmaState(blocks["ema.means"].copy(), header["ema_s"],
                                int(blocks["ema.k"][0]))
    reg = None
    if "regressor.A" in blocks:
        A = blocks["regressor.A"]
        reg = Cp.CompressionRegressor(A.shape[0], A.shape[1], np.random.default_rng(0))
        reg.A.value[...] = A
        reg.b.value[...] = blocks["regressor.b"]
    return model, reg


# --------------------------------------------------------------------------
# runs

def _clean(x):
    """JSON-safe copy: NaN -> None, numpy scalars -> python."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (float, np.floating)):
        return None if math.isnan(x) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


@dataclass
class RunReport:
    config: dict
    config_hash: str
    mode: str
    losses: list
    epochs: list
    metrics: dict
    weights: list
    coefficients: list
    compressor_history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return _clean(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def compressed_source(model, reg, X) -> DistanceSource:
    return DistanceSource.from_embedding(Cp.compressed_embeddings(model, reg, X))


def run(cfg: RunConfig, out_dir=None):
    """Train (and optionally compress) per ``cfg``; returns ``(report, model, regressor)``."""
    rngs = _rngs(cfg.seed)
    split = zsl_split(load_dataset(cfg))
    model = build_model(cfg, split.train.dim, split.train.class_count, rngs["init"])
    test_X, test_y = split.test.features, split.test.labels

    def on_epoch(rec):
        if cfg.eval_every_epoch:
            m = evaluate(model.distance_source(test_X), test_y, seed=cfg.eval_seed)
            rec.metrics = {"nmi": m.nmi, "recall@1": m.recall[1]}

    history = En.train(model, split.train, cfg.train_config(), rngs["train"], on_epoch=on_epoch)
    metrics = {"ensemble": evaluate(model.distance_source(test_X), test_y,
                                    seed=cfg.eval_seed).to_dict()}
    reg, comp_hist = None, []
    if cfg.compress:
        reg, comp_hist = Cp.train_compressor(
            model, split.train, epochs=cfg.compressor_epochs, P=cfg.batch_classes,
            K=cfg.batch_per_class, lr=cfg.compressor_lr, eps=cfg.compressor_eps, rng=rngs["compress"])
        metrics["compressed"] = evaluate(compressed_source(model, reg, test_X), test_y,
                                         seed=cfg.eval_seed).to_dict()
    report = RunReport(
        config=cfg.to_dict(), config_hash=cfg.config_hash(), mode=cfg.mode,
        losses=list(model.loss_names), epochs=[r.to_dict() for r in history], metrics=metrics,
        weights=model.weights().tolist(), coefficients=model.c.value.tolist(),
        compressor_history=comp_hist,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        save_checkpoint(out / "model.ckpt", model, reg, cfg)
        emit_plot_data(report, out)
    return report, model, reg


def emit_plot_data(report: RunReport | dict, out_dir):
    """Write ``curves.csv`` (one row per epoch) and ``metrics.json``."""
    rep = report.to_dict() if isinstance(report, RunReport) else report
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = rep.get("losses", [])
    header = (["epoch"] + [f"raw_{n}" for n in names] + [f"lhat_{n}" for n in names]
              + [f"w_{n}" for n in names] + ["D", "total", "lr", "test_nmi", "test_recall1"])
    with (out / "curves.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rep.get("epochs", []):
            m = r.get("metrics") or {}
            w.writerow([r["epoch"], *r["raw"], *r["l_hat"], *r["w"],
                        "" if r["D"] is None else r["D"], r["total"], r["lr"],
                        m.get("nmi", ""), m.get("recall@1", "")])
    final = {"metrics": rep.get("metrics", {}), "weights": rep.get("weights", []),
             "config_hash": rep.get("config_hash")}
    (out / "metrics.json").write_text(json.dumps(final, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# CLI

def _config_from_args(args) -> RunConfig:
    raw = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        raw["seed"] = args.seed
    return RunConfig.from_dict(raw)


def cmd_train(args):
    cfg = _config_from_args(args)
    report, _, _ = run(cfg, args.out)
    print(json.dumps(report.to_dict()["metrics"], indent=2, sort_keys=True))


def cmd_eval(args):
    cfg = _config_from_args(args)
    out = Path(args.out)
    model, reg = load_checkpoint(out / "model.ckpt")
    split = zsl_split(load_dataset(cfg))
    X, y = split.test.features, split.test.labels
    metrics = {"ensemble": evaluate(model.distance_source(X), y, seed=cfg.eval_seed).to_dict()}
    if reg is not None:
        metrics["compressed"] = evaluate(compressed_source(model, reg, X), y,
                                         seed=cfg.eval_seed).to_dict()
    (out / "eval.json").write_text(json.dumps(_clean(metrics), indent=2, sort_keys=True) + "\n")
    print(json.dumps(_clean(metrics), indent=2, sort_keys=True))


def cmd_compress(args):
    cfg = _config_from_args(args)
    out = Path(args.out)
    model, _ = load_checkpoint(out / "model.ckpt")
    if model.mode != "WEDL":
        raise SystemExit("compress needs a WEDL checkpoint")
    split = zsl_split(load_dataset(cfg))
    reg, hist = Cp.train_compressor(model, split.train, epochs=cfg.compressor_epochs,
                                    P=cfg.batch_classes, K=cfg.batch_per_class,
                                    lr=cfg.compressor_lr, eps=cfg.compressor_eps,
                                    rng=_rngs(cfg.seed)["compress"])
    metrics = evaluate(compressed_source(model, reg, split.test.features), split.test.labels,
                       seed=cfg.eval_seed).to_dict()
    save_checkpoint(out / "model.ckpt", model, reg, cfg)
    result = {"compressor_history": hist, "compressed": metrics}
    (out / "compress.json").write_text(json.dumps(_clean(result), indent=2, sort_keys=True) + "\n")
    print(json.dumps(_clean(metrics), indent=2, sort_keys=True))


def cmd_gradcheck(args):
    from .gradcheck import run_gradchecks

    seed = 0 if args.seed is None else args.seed
    results = run_gradchecks(args.instances, seed)
    ok = True
    for name, err in results.items():
        passed = err <= args.tol
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name:<22} max rel err {err:.3e}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.json").write_text(
            json.dumps(_clean(results), indent=2, sort_keys=True) + "\n")
    return 0 if ok else 1


def cmd_synth(args):
    cfg = _config_from_args(args)
    ds = load_dataset(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"features.{args.format}"
    save_features(ds, path, args.format)
    print(f"wrote {len(ds)} records (d={ds.dim}, C={ds.class_count}) to {path}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dmlensemble",
                                     description="Train and evaluate loss ensembles for DML.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=needs_config, help="output directory")

    common(sub.add_parser("train", help="train, evaluate, write report/curves/checkpoint"))
    common(sub.add_parser("eval", help="evaluate the checkpoint in --out on the test split"))
    common(sub.add_parser("compress", help="fit the compression regressor to a WEDL checkpoint"))
    p = sub.add_parser("gradcheck", help="finite-difference check every analytic gradient")
    common(p, needs_config=False)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p = sub.add_parser("synth", help="write the config's synthetic dataset to disk")
    common(p)
    p.add_argument("--format", choices=("csv", "bin"), default="csv")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    handler = {"train": cmd_train, "eval": cmd_eval, "compress": cmd_compress,
               "gradcheck": cmd_gradcheck, "synth": cmd_synth}[args.command]
    try:
        return handler(args) or 0
    except (ConfigError, En.TrainingDiverged, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
