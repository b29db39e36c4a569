# %% [markdown]
# # Synthetic CT phantoms
#
# Two elliptical lung fields with smooth texture; lesions are soft blobs that
# run over neighbouring slices. Severity comes from the lesion share of lung area.

# %%
import tempfile
from pathlib import Path

import numpy as np

from covtanet import SynthConfig, load_dataset, resample_indices, synth_dataset
from covtanet.data import make_folds, synth_generate

volumes = synth_dataset(seed=0, count=6, mix="1:1:1", cfg=SynthConfig(slices=8, height=64, width=64))
for v in volumes:
    print(v.id, v.label_class, f"lesion pixels {v.masks.mean():.3f}", v.slices.shape)

# %% [markdown]
# A coarse look at one severe slice: lesions are brighter than lung.

# %%
v = next(v for v in volumes if v.label_class == "severe")
k = int(np.argmax(v.masks.sum((1, 2))))
for row in v.slices[k][::4]:
    print("".join(" .:-=+*#"[min(7, int(p * 8))] for p in row[::2]))

# %% [markdown]
# Longer volumes are cut down to a fixed slice budget.

# %%
print(resample_indices(40, 8))

# %% [markdown]
# On disk: one directory per volume plus an index with stratified folds.

# %%
with tempfile.TemporaryDirectory() as root:
    synth_generate(Path(root) / "data", seed=1, count=15, sizes=(4, 32, 32))
    loaded, folds = load_dataset(Path(root) / "data")
    print(len(loaded), "volumes;", "fold sizes", [len(f) for f in folds])

print(make_folds([f"v{i}" for i in range(15)], [i % 3 for i in range(15)], seed=0))
