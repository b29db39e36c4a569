# %% [markdown]
# # Losses and metrics
#
# Focal Tversky for masks, clamped BCE for the two classification heads, and
# confusion-count scores for evaluation.

# %%
import numpy as np
import torch

from covtanet import cls_scores, confusion, focal_tversky, joint_loss, seg_scores

truth = torch.tensor([[1.0, 1.0, 0.0, 0.0]])
for pred in ([1, 1, 0, 0], [1, 0, 0, 0], [0, 0, 1, 1]):
    p = torch.tensor([pred], dtype=torch.float32)
    print(pred, "FTL =", round(focal_tversky(p, truth).item(), 4))

# %% [markdown]
# Severity only counts for infected volumes. Here the second volume is
# normal, so its severity prediction of 0.9 costs nothing.

# %%
t = lambda *v: torch.tensor(v, dtype=torch.float64)
total, diag, sev = joint_loss(t(1, 0, 1), t(0.8, 0.3, 0.6), t(1, 0, 0), t(0.7, 0.9, 0.2), components=True)
print(f"total {total.item():.4f} = diagnosis {diag.item():.4f} + severity {sev.item():.4f}")

# %%
rng = np.random.default_rng(0)
truth = rng.random((32, 32)) > 0.7
pred = truth.copy()
pred[:4] = ~pred[:4]
print({k: round(v, 3) for k, v in seg_scores(confusion(pred, truth)).items()})
print(cls_scores([0.9, 0.7, 0.2, 0.6], [1, 0, 1, 1]))
