# %% [markdown]
# # Config-driven runs
#
# Everything above is also reachable through a JSON config, either from
# Python (`runner.run`) or from the `dmlensemble` command line.

# %%
import csv
import json
import subprocess
import sys
import tempfile
from pathlib import Path

from dmlensemble.runner import RunConfig, run

out = Path(tempfile.mkdtemp())
config = {
    "dataset": {"synthetic": {"classes": 16, "per_class": 20, "d": 12, "sep": 4.0}},
    "mode": "WEDL", "embed_dim": 8, "epochs": 4, "lr": 1e-3,
    "compress": True, "compressor_epochs": 5, "seed": 0,
}
report, model, reg = run(RunConfig.from_dict(config), out / "py")
print(sorted(p.name for p in (out / "py").iterdir()))
print(json.dumps(report.to_dict()["metrics"]["ensemble"]["recall"]))

# %% [markdown]
# `curves.csv` has one row per epoch with raw and normalized losses, weights,
# diversity, learning rate and the per-epoch test metrics.

# %%
with (out / "py" / "curves.csv").open() as fh:
    for row in list(csv.reader(fh))[:3]:
        print(row[:6], "...")

# %% [markdown]
# ## The same through the CLI
# Bad configs are rejected with every problem listed at once.

# %%
(out / "cfg.json").write_text(json.dumps(config))
cli = [sys.executable, "-m", "dmlensemble"]
subprocess.run(cli + ["train", "--config", str(out / "cfg.json"), "--out", str(out / "cli")],
               check=True, capture_output=True)
print((out / "cli" / "report.json").read_bytes() == (out / "py" / "report.json").read_bytes())

(out / "bad.json").write_text(json.dumps({**config, "mode": "WEDLX", "lr": -1}))
res = subprocess.run(cli + ["train", "--config", str(out / "bad.json"), "--out", str(out)],
                     capture_output=True, text=True)
print(res.returncode, res.stderr.strip())
