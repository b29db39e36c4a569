"""Per-slice regional feature extractor applied to TA-SegNet fusion maps."""
import torch.nn as nn
import torch.nn.functional as F

from .attention import EXPAND_RATIO, SQUEEZE_RATIO, TAU, init_weights
from .errors import ConfigError, InvalidShapeError


def stage_widths(in_channels, stages=3, cap=128):
    return [min(cap, in_channels * 2 ** (k + 1)) for k in range(stages)]


class RegionalExtractor(nn.Module):
    """``stages`` x (3x3 conv + ReLU -> TAU -> 2x2 max-pool), widths doubling up to ``cap``.

    One set of weights is shared by every slice of every volume.
    """

    def __init__(self, in_channels, stages=3, cap=128,
                 expand_ratio=EXPAND_RATIO, squeeze_ratio=SQUEEZE_RATIO):
        super().__init__()
        if stages < 1:
            raise ConfigError("regional extractor needs at least one stage")
        self.in_channels = in_channels
        self.stages = stages
        widths = stage_widths(in_channels, stages, cap)
        self.out_channels = widths[-1]
        cins = [in_channels] + widths[:-1]
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, padding=1) for a, b in zip(cins, widths))
        self.taus = nn.ModuleList(
            TAU(b, expand_ratio, squeeze_ratio, name=f"rf_tau{k + 1}") for k, b in enumerate(widths))
        init_weights(self.convs)

    def output_shape(self, size):
        h, w = size
        step = 2 ** self.stages
        if h % step or w % step:
            raise ConfigError(f"spatial size {h}x{w} is not divisible by 2^{self.stages}")
        return self.out_channels, h // step, w // step

    def forward(self, f_fus):
        if f_fus.dim() != 4 or f_fus.shape[1] != self.in_channels:
            raise InvalidShapeError(
                f"expected (N, {self.in_channels}, H, W) fusion map, got {tuple(f_fus.shape)}")
        self.output_shape(f_fus.shape[-2:])
        x = f_fus
        for conv, tau in zip(self.convs, self.taus):
            x = F.max_pool2d(tau(F.relu(conv(x))), 2)
        return x
