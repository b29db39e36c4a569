# %% [markdown]
# # Two-phase training
#
# Phase 1 fits TA-SegNet on slices with focal Tversky. Phase 2 freezes it and
# fits the regional extractor plus the two volumetric paths on the fusion maps.
# Sizes are small so the notebook runs in about two minutes on one CPU core.

# %%
from dataclasses import replace

import numpy as np

from covtanet import SynthConfig, TrainConfig, evaluate, synth_dataset, train_joint, train_segmentation

sc = SynthConfig(slices=8, height=32, width=32)
train = synth_dataset(11, 16, "1:1:1", sc)
held = synth_dataset(12, 12, "1:1:1", sc)
cfg = TrainConfig(levels=3, base_channels=8, fused_channels=8, rf_stages=2, rf_cap=48,
                  fusion_width=32, hidden_width=32, lr0=1e-4, max_epochs=1000)

# %%
seg = train_segmentation(train, replace(cfg, max_steps=200))
for e in seg.log.epochs()[::3]:
    print(f"seg   step {e['step']:4d}  loss {e['loss']:.3f}  dice {e['dice']:.3f}")

# %% [markdown]
# The segmentation weights are bitwise untouched by phase 2.

# %%
before = {k: seg.store[k].copy() for k in seg.store.names("segnet.")}
joint = train_joint(train, seg.store, replace(cfg, phase="joint", max_steps=300))
for e in joint.log.epochs()[::5]:
    print(f"joint step {e['step']:4d}  loss {e['loss']:.3f}  "
          f"acc {e['diagnosis_accuracy']:.2f}/{e['severity_accuracy']:.2f}")
print("segnet unchanged:", all(np.array_equal(joint.store[k], v) for k, v in before.items()))

# %%
report = evaluate(joint.model, held, cfg)
print(report.diagnosis)
print(report.severity)
