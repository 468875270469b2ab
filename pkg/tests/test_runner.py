import csv
import json

import numpy as np
import pytest

from dmlensemble import runner
from dmlensemble.runner import ConfigError, RunConfig, load_checkpoint, run, save_checkpoint


def _raw(**over):
    raw = {"dataset": {"synthetic": {"classes": 12, "per_class": 8, "d": 8, "sep": 3.0}},
           "embed_dim": 4, "epochs": 2, "batch_classes": 4, "batch_per_class": 3, "lr": 1e-3}
    raw.update(over)
    return raw


def _cfg(**over):
    return RunConfig.from_dict(_raw(**over))


@pytest.fixture(scope="module")
def wedl_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("wedl")
    report, model, reg = run(_cfg(compress=True, compressor_epochs=2), out)
    return out, report, model, reg


class TestConfig:
    def test_defaults(self):
        cfg = _cfg()
        assert cfg.mode == "WEDL" and cfg.adam_eps == 0.01 and cfg.eta == 100.0
        assert cfg.loss_names == ["triplet", "binomial", "proxy_nca", "classification"]

    def test_baseline_mode(self):
        cfg = _cfg(mode="baseline:binomial")
        assert cfg.model_mode == "baseline" and cfg.loss_names == ["binomial"]

    def test_all_problems_reported(self):
        with pytest.raises(ConfigError) as exc:
            _cfg(mode="bogus", lr=-1, gamma=1.5, losses=["triplet"])
        text = str(exc.value)
        for key in ("mode", "lr", "gamma", "losses"):
            assert key in text
        assert len(exc.value.problems) == 4

    def test_unknown_and_missing_keys(self):
        with pytest.raises(ConfigError, match="unknown key 'lrr'"):
            RunConfig.from_dict({"dataset": {"synthetic": {}}, "lrr": 1})
        with pytest.raises(ConfigError, match="dataset"):
            RunConfig.from_dict({})

    def test_dataset_shape(self):
        with pytest.raises(ConfigError):
            _cfg(dataset={"path": "x.csv", "synthetic": {}})
        with pytest.raises(ConfigError, match="warp"):
            _cfg(dataset={"synthetic": {"warp": "spiral"}})

    def test_compress_requires_wedl(self):
        with pytest.raises(ConfigError, match="compress"):
            _cfg(mode="WEL", compress=True)

    def test_hash_tracks_content(self):
        assert _cfg().config_hash() == _cfg().config_hash()
        assert _cfg().config_hash() != _cfg(seed=1).config_hash()

    def test_dict_roundtrip(self):
        cfg = _cfg(alpha=0.05)
        assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


class TestRun:
    def test_outputs(self, wedl_run):
        out, report, _, _ = wedl_run
        for name in ("report.json", "model.ckpt", "curves.csv", "metrics.json"):
            assert (out / name).exists()
        data = json.loads((out / "report.json").read_text())
        assert set(data["metrics"]) == {"ensemble", "compressed"}
        assert len(data["epochs"]) == 2 and len(data["compressor_history"]) == 2
        assert sum(data["weights"]) == pytest.approx(1.0, abs=0.05)

    def test_curves(self, wedl_run):
        out, report, _, _ = wedl_run
        rows = list(csv.reader((out / "curves.csv").open()))
        assert rows[0][0] == "epoch" and "w_proxy_nca" in rows[0] and rows[0][-1] == "test_recall1"
        assert len(rows) == 3 and all(len(r) == len(rows[0]) for r in rows)

    def test_header_only_curves(self, tmp_path):
        runner.emit_plot_data({"losses": ["triplet"], "epochs": []}, tmp_path)
        lines = (tmp_path / "curves.csv").read_text().splitlines()
        assert len(lines) == 1

    def test_report_json_roundtrip(self, wedl_run):
        _, report, _, _ = wedl_run
        assert json.loads(report.to_json()) == report.to_dict()

    def test_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            run(_cfg(seed=4), tmp_path / name)
        for f in ("report.json", "model.ckpt", "curves.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    @pytest.mark.parametrize("mode", ["baseline:triplet", "WEL", "WEL-equal"])
    def test_other_modes(self, mode):
        report, model, reg = run(_cfg(mode=mode, epochs=1))
        assert reg is None and "ensemble" in report.metrics
        assert len(model.heads) == 1


class TestCheckpoint:
    def test_roundtrip_is_exact(self, wedl_run, tmp_path):
        out, report, model, reg = wedl_run
        cfg = _cfg(compress=True, compressor_epochs=2)
        m2, r2 = load_checkpoint(out / "model.ckpt")
        X = runner.zsl_split(runner.load_dataset(cfg)).test.features
        assert np.array_equal(m2.per_head_embeddings(X), model.per_head_embeddings(X))
        assert np.array_equal(m2.weights(), model.weights())
        assert np.array_equal(r2.A.value, reg.A.value) and np.array_equal(r2.b.value, reg.b.value)
        save_checkpoint(tmp_path / "again.ckpt", m2, r2, cfg)
        assert (tmp_path / "again.ckpt").read_bytes() == (out / "model.ckpt").read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"XXXX\x01")
        with pytest.raises(ValueError):
            load_checkpoint(p)

    def test_truncated(self, wedl_run, tmp_path):
        out = wedl_run[0]
        p = tmp_path / "short.ckpt"
        p.write_bytes((out / "model.ckpt").read_bytes()[:-5])
        with pytest.raises(ValueError):
            load_checkpoint(p)


class TestCli:
    def _write(self, tmp_path, **over):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(_raw(**over)))
        return str(path)

    def test_train_eval_compress(self, tmp_path, capsys):
        cfg = self._write(tmp_path, epochs=1)
        out = str(tmp_path / "run")
        assert runner.main(["train", "--config", cfg, "--out", out]) == 0
        assert runner.main(["eval", "--config", cfg, "--out", out]) == 0
        assert runner.main(["compress", "--config", cfg, "--out", out]) == 0
        assert {"eval.json", "compress.json"} <= {p.name for p in (tmp_path / "run").iterdir()}
        ev = json.loads((tmp_path / "run" / "eval.json").read_text())
        rep = json.loads((tmp_path / "run" / "report.json").read_text())
        assert ev["ensemble"] == rep["metrics"]["ensemble"]

    def test_seed_override(self, tmp_path):
        cfg = self._write(tmp_path, epochs=1)
        runner.main(["train", "--config", cfg, "--out", str(tmp_path / "s"), "--seed", "7"])
        assert json.loads((tmp_path / "s" / "report.json").read_text())["config"]["seed"] == 7

    def test_synth(self, tmp_path):
        cfg = self._write(tmp_path)
        assert runner.main(["synth", "--config", cfg, "--out", str(tmp_path), "--format", "bin"]) == 0
        ds = runner.load_features(tmp_path / "features.bin", "bin")
        assert len(ds) == 96 and ds.dim == 8

    def test_invalid_config_exit_code(self, tmp_path, capsys):
        cfg = self._write(tmp_path, mode="nope")
        assert runner.main(["train", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
        assert "mode" in capsys.readouterr().err

    def test_gradcheck(self, tmp_path, capsys):
        assert runner.main(["gradcheck", "--instances", "2", "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out
        assert (tmp_path / "gradcheck.json").exists()
