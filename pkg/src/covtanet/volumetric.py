"""Volume-level aggregation, dilated fusion and the diagnosis/severity heads."""
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import EXPAND_RATIO, SQUEEZE_RATIO, TAU, init_weights
from .errors import ConfigError, InvalidShapeError
from .regional import RegionalExtractor

DILATION_RATES = (1, 2, 4)


def check_dilation_extent(size, rates=DILATION_RATES):
    # the off-centre taps of a rate-r kernel never land inside a map of extent <= r
    if min(size) <= max(rates):
        raise ConfigError(f"spatial extent {tuple(size)} too small for dilation rate {max(rates)}")


class VolumetricPath(nn.Module):
    """One prediction path: per-slice TAU, channel concatenation, dilated fusion, dense layers."""

    def __init__(self, slice_channels, slices, reduced=64, hidden=64, rates=DILATION_RATES,
                 expand_ratio=EXPAND_RATIO, squeeze_ratio=SQUEEZE_RATIO, name="path"):
        super().__init__()
        self.name = name
        self.slice_channels = slice_channels
        self.slices = slices
        self.rates = tuple(rates)
        self.tau = TAU(slice_channels, expand_ratio, squeeze_ratio, name=f"{name}.tau")
        self.reduce = nn.Conv2d(slices * slice_channels, reduced, 1)
        self.dilated = nn.ModuleList(
            nn.Conv2d(reduced, reduced, 3, padding=r, dilation=r) for r in self.rates)
        self.merge = nn.Conv2d(reduced, reduced, 3, padding=1)
        self.fc1 = nn.Linear(reduced, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        for m in (self.reduce, self.dilated, self.merge, self.fc1, self.fc2):
            init_weights(m)

    def aggregate(self, regional):
        """(V, s, c', h', w') slice features -> (V, s*c', h', w'), slice-major channel blocks."""
        if regional.dim() != 5:
            raise InvalidShapeError(f"expected (V, s, C, H, W), got {tuple(regional.shape)}")
        v, s, c, h, w = regional.shape
        if s != self.slices or c != self.slice_channels:
            raise InvalidShapeError(
                f"{self.name}: expected {self.slices} slices x {self.slice_channels} channels, got {s} x {c}")
        gated = self.tau(regional.reshape(v * s, c, h, w))
        return gated.reshape(v, s * c, h, w)

    def fuse_dilated(self, agg):
        check_dilation_extent(agg.shape[-2:], self.rates)
        x = F.relu(self.reduce(agg))
        x = sum(conv(x) for conv in self.dilated)
        x = F.relu(self.merge(F.relu(x)))
        return x.mean(dim=(2, 3))

    def forward(self, regional):
        vec = self.fuse_dilated(self.aggregate(regional))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(vec)))).squeeze(1)


class JointClassifier(nn.Module):
    """Shared regional extractor feeding separate diagnosis and severity paths."""

    def __init__(self, fusion_channels, slices=8, stages=3, cap=128, reduced=64, hidden=64,
                 rates=DILATION_RATES, expand_ratio=EXPAND_RATIO, squeeze_ratio=SQUEEZE_RATIO):
        super().__init__()
        self.slices = slices
        self.regional = RegionalExtractor(fusion_channels, stages, cap, expand_ratio, squeeze_ratio)
        c = self.regional.out_channels
        kw = dict(reduced=reduced, hidden=hidden, rates=rates,
                  expand_ratio=expand_ratio, squeeze_ratio=squeeze_ratio)
        self.diagnosis = VolumetricPath(c, slices, name="diagnosis", **kw)
        self.severity = VolumetricPath(c, slices, name="severity", **kw)

    def regional_features(self, fusion):
        """(V, s, C, H, W) fusion maps -> (V, s, c', h', w')."""
        if fusion.dim() != 5:
            raise InvalidShapeError(f"expected (V, s, C, H, W) fusion maps, got {tuple(fusion.shape)}")
        v, s = fusion.shape[:2]
        if s != self.slices:
            raise InvalidShapeError(f"expected {self.slices} slices per volume, got {s}")
        reg = self.regional(fusion.reshape(v * s, *fusion.shape[2:]))
        return reg.reshape(v, s, *reg.shape[1:])

    def forward(self, fusion):
        """Return ``(p_diagnosis, p_severity)``, each of shape (V,)."""
        reg = self.regional_features(fusion)
        return self.diagnosis(reg), self.severity(reg)

    predict = forward
