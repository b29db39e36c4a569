"""TA-SegNet: encoder-decoder with TAU-gated skips and multi-scale fusion."""
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import EXPAND_RATIO, SQUEEZE_RATIO, TAU, init_weights
from .errors import ConfigError, InvalidShapeError

THRESHOLD = 0.5

# ablation toggle sets. V4 is the encoder-in-fusion counterpart of V2 (a literal
# reading would duplicate V3). V8 (pretrained backbone) is not built.
ABLATIONS = {
    "V1": dict(encoder_tau=False, decoder_tau=False, encoder_in_fusion=False, decoder_in_fusion=False),
    "V2": dict(encoder_tau=False, decoder_tau=False, encoder_in_fusion=False, decoder_in_fusion=True),
    "V3": dict(encoder_tau=True, decoder_tau=False, encoder_in_fusion=False, decoder_in_fusion=False),
    "V4": dict(encoder_tau=False, decoder_tau=False, encoder_in_fusion=True, decoder_in_fusion=False),
    "V5": dict(encoder_tau=False, decoder_tau=True, encoder_in_fusion=False, decoder_in_fusion=False),
    "V6": dict(encoder_tau=True, decoder_tau=True, encoder_in_fusion=False, decoder_in_fusion=False),
    "V7": dict(encoder_tau=True, decoder_tau=True, encoder_in_fusion=True, decoder_in_fusion=True),
}


@dataclass
class SegNetConfig:
    levels: int = 4
    channels: tuple = (16, 32, 64, 128)
    fused_channels: int = 16
    input_size: tuple = (64, 64)
    encoder_tau: bool = True
    decoder_tau: bool = True
    encoder_in_fusion: bool = True
    decoder_in_fusion: bool = True
    expand_ratio: int = EXPAND_RATIO
    squeeze_ratio: int = SQUEEZE_RATIO
    in_channels: int = 1

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.input_size = tuple(int(s) for s in self.input_size)
        self.validate()

    @classmethod
    def ablation(cls, version, **kwargs):
        try:
            toggles = ABLATIONS[version]
        except KeyError:
            raise ConfigError(f"unknown ablation version {version!r}; known: {sorted(ABLATIONS)}")
        return cls(**{**kwargs, **toggles})

    @property
    def uses_fusion(self):
        return self.encoder_in_fusion or self.decoder_in_fusion

    @property
    def fusion_channels(self):
        """Channel width of the feature map handed to the head and to phase 2."""
        if self.uses_fusion:
            return self.levels * self.fused_channels
        return self.channels[0]

    def validate(self):
        if self.levels < 2:
            raise ConfigError(f"need at least 2 levels, got {self.levels}")
        if len(self.channels) != self.levels:
            raise ConfigError(f"{self.levels} levels but {len(self.channels)} channel widths")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigError(f"channel widths must be strictly increasing: {self.channels}")
        if self.fused_channels < 1:
            raise ConfigError("fused_channels must be positive")
        self.check_size(self.input_size)

    def check_size(self, size):
        step = 2 ** (self.levels - 1)
        h, w = size
        if h < 1 or w < 1 or h % step or w % step:
            raise ConfigError(f"input size {h}x{w} is not divisible by 2^{self.levels - 1}")

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class SegOutput:
    prob_mask: torch.Tensor  # (N, 1, H, W)
    fusion: torch.Tensor     # (N, fusion_channels, H, W)
    logits: torch.Tensor = field(repr=False, default=None)

    def binary_mask(self, threshold=THRESHOLD):
        return (self.prob_mask > threshold).to(torch.uint8)


def bilinear_upsample(x, size):
    """Corner-aligned bilinear resize of an NCHW map to ``size`` = (H, W)."""
    size = tuple(size)
    if tuple(x.shape[-2:]) == size:
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=True)


class ConvBlock(nn.Sequential):
    """Two 3x3 convolutions, each followed by a rectifier."""

    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(),
            nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU())


class Encoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        widths = (cfg.in_channels,) + cfg.channels
        self.blocks = nn.ModuleList(ConvBlock(a, b) for a, b in zip(widths, widths[1:]))

    def forward(self, x):
        out = []
        for i, block in enumerate(self.blocks):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            out.append(x)
        return out


def _tau_list(enabled, channels, cfg, prefix):
    if not enabled:
        return None
    return nn.ModuleList(
        TAU(c, cfg.expand_ratio, cfg.squeeze_ratio, name=f"{prefix}{i + 1}")
        for i, c in enumerate(channels))


class TASegNet(nn.Module):
    """Slice segmentation network.

    ``encoder`` may be any module mapping (N, in_channels, H, W) to the list of
    level features with the configured widths; this is the slot a pretrained
    backbone plugs into.
    """

    def __init__(self, cfg=None, encoder=None):
        super().__init__()
        self.cfg = cfg = cfg or SegNetConfig()
        ch = cfg.channels
        self.encoder = encoder if encoder is not None else Encoder(cfg)
        self.encoder_taus = _tau_list(cfg.encoder_tau, ch, cfg, "enc_tau")
        self.decoder_taus = None
        self.decoder_blocks = None
        if self.has_decoder:
            self.decoder_taus = _tau_list(cfg.decoder_tau, ch, cfg, "dec_tau")
            dec = [ConvBlock(ch[-1], ch[-1])]
            dec += [ConvBlock(ch[i + 1] + ch[i], ch[i]) for i in range(cfg.levels - 2, -1, -1)]
            self.decoder_blocks = nn.ModuleList(reversed(dec))  # index i -> level i+1
        if cfg.uses_fusion:
            self.reducers = nn.ModuleList(
                nn.Conv2d(self._fusion_in(c), cfg.fused_channels, 1) for c in ch)
        else:
            self.reducers = None
        self.head = nn.Conv2d(cfg.fusion_channels, 1, 3, padding=1)
        if encoder is None:
            init_weights(self.encoder)
        for m in (self.decoder_blocks, self.reducers, self.head):
            if m is not None:
                init_weights(m)

    @property
    def has_decoder(self):
        # with encoder-only fusion nothing downstream reads the decoder, so it is not built
        return self.cfg.decoder_in_fusion or not self.cfg.uses_fusion

    def _fusion_in(self, c):
        return c * (int(self.cfg.encoder_in_fusion) + int(self.cfg.decoder_in_fusion))

    def _check_input(self, x):
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise InvalidShapeError(
                f"expected (N, {self.cfg.in_channels}, H, W) input, got {tuple(x.shape)}")
        self.cfg.check_size(tuple(x.shape[-2:]))

    def encode(self, x):
        self._check_input(x)
        feats = self.encoder(x)
        if len(feats) != self.cfg.levels:
            raise InvalidShapeError(f"encoder returned {len(feats)} levels, expected {self.cfg.levels}")
        h, w = x.shape[-2:]
        for i, (e, c) in enumerate(zip(feats, self.cfg.channels)):
            want = (c, h >> i, w >> i)
            if tuple(e.shape[1:]) != want:
                raise InvalidShapeError(f"encoder level {i + 1}: expected {want}, got {tuple(e.shape[1:])}")
        return feats

    def gate_skips(self, encoded):
        if self.encoder_taus is None:
            return list(encoded)
        return [tau(e) for tau, e in zip(self.encoder_taus, encoded)]

    def decode(self, encoded, skips=None):
        """Decoder maps D_1..D_N; each mirrors the shape of its encoder level."""
        if not self.has_decoder:
            raise ConfigError("this configuration fuses encoder maps only and has no decoder")
        if len(encoded) != self.cfg.levels:
            raise InvalidShapeError(f"need {self.cfg.levels} encoder levels, got {len(encoded)}")
        if skips is None:
            skips = self.gate_skips(encoded)
        n = self.cfg.levels
        decoded = [None] * n
        d = None
        for i in range(n - 1, -1, -1):
            if d is None:
                x = skips[i]
            else:
                up = bilinear_upsample(d, skips[i].shape[-2:])
                if up.shape[0] != skips[i].shape[0]:
                    raise InvalidShapeError("batch mismatch between skip and upsampled path")
                x = torch.cat([up, skips[i]], dim=1)
            d = self.decoder_blocks[i](x)
            if self.decoder_taus is not None:
                d = self.decoder_taus[i](d)
            if d.shape != encoded[i].shape:
                raise InvalidShapeError(
                    f"decoder level {i + 1} shape {tuple(d.shape)} != encoder {tuple(encoded[i].shape)}")
            decoded[i] = d
        return decoded

    def fuse(self, skips, decoded):
        """Per level: concat gated maps, reduce to C_u channels, upsample, then stack levels."""
        cfg = self.cfg
        if not cfg.uses_fusion:
            raise ConfigError("fusion needs encoder_in_fusion or decoder_in_fusion")
        size = skips[0].shape[-2:]
        parts = []
        for i in range(cfg.levels):
            sel = []
            if cfg.encoder_in_fusion:
                sel.append(skips[i])
            if cfg.decoder_in_fusion:
                sel.append(decoded[i])
            x = F.relu(self.reducers[i](torch.cat(sel, dim=1)))
            parts.append(bilinear_upsample(x, size))
        return torch.cat(parts, dim=1)

    def features(self, x):
        encoded = self.encode(x)
        skips = self.gate_skips(encoded)
        decoded = self.decode(encoded, skips) if self.has_decoder else None
        if self.cfg.uses_fusion:
            return self.fuse(skips, decoded)
        return decoded[0]

    def forward(self, x):
        fusion = self.features(x)
        logits = self.head(fusion)
        return SegOutput(torch.sigmoid(logits), fusion, logits)

    segment = forward


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())
