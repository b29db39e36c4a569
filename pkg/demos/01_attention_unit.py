# %% [markdown]
# # The tri-level attention unit
#
# A TAU gates a feature map with the product of three masks: one per channel,
# one per position, and one per (channel, position) pair. The gated map is then
# blended with the input through a learned weight.

# %%
import torch

from covtanet import TAU

torch.manual_seed(0)
tau = TAU(8)
f = torch.rand(2, 8, 16, 16)

# %% [markdown]
# Each branch returns a mask in (0, 1) with its own shape.

# %%
for name, branch in (("channel", tau.ca), ("spatial", tau.sa), ("pixel", tau.pa)):
    a = branch(f)
    print(f"{name:8s} {tuple(a.shape)}  range [{a.min():.3f}, {a.max():.3f}]")

# %% [markdown]
# The combined mask broadcasts to the feature shape.

# %%
with torch.no_grad():
    mask = tau.mask(f)
print(tuple(mask.shape), round(mask.mean().item(), 4))

# %% [markdown]
# alpha starts at 0.5. Pushing the raw blend weight high makes the unit
# an identity, which is handy when a TAU should be switched off in place.

# %%
print("alpha =", tau.alpha.item())
with torch.no_grad():
    tau.blend_raw.fill_(20.0)
    print("max change with blend_raw=20:", float((tau(f) - f).abs().max()))
