# %% [markdown]
# # TA-SegNet and its ablation lattice
#
# An encoder-decoder with optional attention on the skips, on the decoder,
# and a multi-scale fusion map built from either side.

# %%
import torch

from covtanet import ABLATIONS, SegNetConfig, TASegNet
from covtanet.segnet import count_parameters

small = dict(levels=3, channels=(8, 16, 32), fused_channels=8, input_size=(64, 64))
x = torch.rand(2, 1, 64, 64)

# %% [markdown]
# Seven toggle settings, V1 (plain encoder-decoder) through V7 (everything on).

# %%
for version, toggles in sorted(ABLATIONS.items()):
    net = TASegNet(SegNetConfig.ablation(version, **small))
    out = net(x)
    on = [k for k, v in toggles.items() if v]
    print(f"{version}  params={count_parameters(net):6d}  fusion={tuple(out.fusion.shape[1:])}  {on}")

# %% [markdown]
# The probability mask always matches the input size; thresholding at 0.5
# gives the binary mask.

# %%
out = TASegNet(SegNetConfig(**small))(x)
print(tuple(out.prob_mask.shape), out.binary_mask().dtype)
