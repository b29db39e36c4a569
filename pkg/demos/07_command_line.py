# %% [markdown]
# # The command line, end to end
#
# The same chain a user would type in a shell: synth, train-seg,
# train-joint, infer, eval. A tiny config keeps it quick.

# %%
import json
import tempfile
from pathlib import Path

from covtanet.cli import main

root = Path(tempfile.mkdtemp())
(root / "tiny.cfg").write_text("levels = 2\nbase_channels = 4\nfused_channels = 4\nrf_stages = 1\n"
                               "rf_cap = 8\nfusion_width = 8\nhidden_width = 8\nslice_budget = 4\nlr0 = 1e-3\n")
run = lambda *a: print(" ".join(a[:1]), "->", main(list(a)))

run("synth", "--out", str(root / "data"), "--count", "15", "--slices", "4", "--size", "32", "--seed", "0")
run("train-seg", "--data", str(root / "data"), "--config", str(root / "tiny.cfg"),
    "--out", str(root / "seg.ckpt"), "--max-steps", "20")
run("train-joint", "--data", str(root / "data"), "--seg-ckpt", str(root / "seg.ckpt"),
    "--config", str(root / "tiny.cfg"), "--out", str(root / "joint.ckpt"), "--max-steps", "20")
run("infer", "--ckpt", str(root / "joint.ckpt"), "--volume", str(root / "data" / "vol0000"),
    "--out", str(root / "infer"))
print(json.loads((root / "infer" / "prediction.json").read_text()))

# %%
run("eval", "--ckpt", str(root / "joint.ckpt"), "--data", str(root / "data"), "--out", str(root / "eval"))
print(sorted(p.name for p in (root / "eval").iterdir()))
print("overlays written to", root / "infer")
