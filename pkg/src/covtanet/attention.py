"""Channel, spatial and pixel attention, and the tri-level attention unit (TAU).

Tensors are NCHW throughout. Each attention branch runs two stages on the
unit's input ``f``:

* recalibration: ``A_r = sigmoid(restore(expand(describe(f))))``, ``F_r = f * A_r``
* generalization: ``A = sigmoid(excite(squeeze(describe'(F_r))))``

The TAU multiplies the three branch maps into one mask ``A_T`` and blends the
gated features back with the input through a learnable ``alpha``.
"""
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidShapeError, NumericError

EXPAND_RATIO = 2
SQUEEZE_RATIO = 4


def init_weights(module):
    """Fan-in scaled uniform weights, zero biases, for every conv/linear below ``module``."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _check_rank4(f, what="feature map"):
    if f.dim() != 4:
        raise InvalidShapeError(f"{what} must be rank 4 (N, C, H, W), got shape {tuple(f.shape)}")


def _check_finite(t, layer):
    if not torch.isfinite(t).all():
        raise NumericError(layer)


def squeeze_width(channels, ratio=SQUEEZE_RATIO):
    if ratio < 1:
        raise ConfigError(f"squeeze ratio must be >= 1, got {ratio}")
    if ratio > channels:
        raise ConfigError(f"squeeze ratio {ratio} exceeds channel count {channels}")
    return max(1, channels // ratio)


def channel_descriptor(f):
    """Per-channel global average, shape (N, C, 1, 1)."""
    _check_rank4(f)
    if f.shape[2] * f.shape[3] < 1:
        raise InvalidShapeError("channel descriptor needs a non-empty spatial extent")
    return f.mean(dim=(2, 3), keepdim=True)


def spatial_descriptor(f, weight, bias=None, dilation=1):
    """Same-padded convolution mapping C channels to a single (N, 1, H, W) map."""
    _check_rank4(f)
    if weight.dim() != 4 or weight.shape[0] != 1 or weight.shape[1] != f.shape[1]:
        raise InvalidShapeError(
            f"spatial kernel must have shape (1, {f.shape[1]}, k, k), got {tuple(weight.shape)}")
    k = weight.shape[-1]
    if k % 2 == 0:
        raise InvalidShapeError("same padding needs an odd kernel size")
    return F.conv2d(f, weight, bias, padding=dilation * (k // 2), dilation=dilation)


def tau_mask(a_c, a_s, a_p):
    """Triple attention mask ``A_P * A_S * A_C`` with channel/spatial broadcasting."""
    for a in (a_c, a_s, a_p):
        _check_rank4(a, "attention map")
    n, c, h, w = a_p.shape
    if tuple(a_c.shape) != (n, c, 1, 1) or tuple(a_s.shape) != (n, 1, h, w):
        raise InvalidShapeError(
            f"inconsistent attention maps: channel {tuple(a_c.shape)}, "
            f"spatial {tuple(a_s.shape)}, pixel {tuple(a_p.shape)}")
    return a_p * (a_s * a_c)


class _Branch(nn.Module):
    kind = None

    def __init__(self, name):
        super().__init__()
        self.name = name

    def _check(self, f):
        _check_rank4(f)
        if f.shape[1] != self.channels:
            raise InvalidShapeError(f"{self.name}: expected {self.channels} channels, got {f.shape[1]}")

    def recalibrate(self, f):
        """Return ``(F_r, A_r)``."""
        self._check(f)
        a_r = torch.sigmoid(self._restore(self._expand(self.describe(f))))
        _check_finite(a_r, f"{self.name}.recalibrate")
        return f * a_r, a_r

    def generalize(self, f_r):
        self._check(f_r)
        a = torch.sigmoid(self._excite(self._squeeze(self.describe_again(f_r))))
        _check_finite(a, f"{self.name}.generalize")
        return a

    def forward(self, f):
        f_r, _ = self.recalibrate(f)
        return self.generalize(f_r)


class ChannelAttention(_Branch):
    kind = "channel"

    def __init__(self, channels, expand_ratio=EXPAND_RATIO, squeeze_ratio=SQUEEZE_RATIO, name="ca"):
        super().__init__(name)
        self.channels = channels
        wide = channels * expand_ratio
        narrow = squeeze_width(channels, squeeze_ratio)
        self.expand = nn.Linear(channels, wide)
        self.restore = nn.Linear(wide, channels)
        self.squeeze = nn.Linear(channels, narrow)
        self.excite = nn.Linear(narrow, channels)

    def describe(self, f):
        return channel_descriptor(f)

    describe_again = describe

    def _dense(self, layer, d):
        n = d.shape[0]
        return layer(d.reshape(n, -1)).reshape(n, -1, 1, 1)

    def _expand(self, d):
        return F.relu(self._dense(self.expand, d))

    def _restore(self, d):
        return self._dense(self.restore, d)

    def _squeeze(self, d):
        return F.relu(self._dense(self.squeeze, d))

    def _excite(self, d):
        return self._dense(self.excite, d)


class SpatialAttention(_Branch):
    kind = "spatial"

    def __init__(self, channels, kernel_size=7, expand_ratio=EXPAND_RATIO, name="sa"):
        super().__init__(name)
        self.channels = channels
        pad = kernel_size // 2
        self.describe_conv = nn.Conv2d(channels, 1, kernel_size, padding=pad)
        self.expand = nn.Conv2d(1, expand_ratio, 3, padding=1)
        self.restore = nn.Conv2d(expand_ratio, 1, 3, padding=1)
        self.describe_again_conv = nn.Conv2d(channels, 1, kernel_size, padding=pad)
        # the descriptor is already one channel wide; the squeeze stage keeps it at 1
        self.squeeze = nn.Conv2d(1, 1, 3, padding=1)
        self.excite = nn.Conv2d(1, 1, 3, padding=1)

    def describe(self, f):
        return spatial_descriptor(f, self.describe_conv.weight, self.describe_conv.bias)

    def describe_again(self, f):
        return spatial_descriptor(f, self.describe_again_conv.weight, self.describe_again_conv.bias)

    def _expand(self, d):
        return F.relu(self.expand(d))

    def _restore(self, d):
        return self.restore(d)

    def _squeeze(self, d):
        return F.relu(self.squeeze(d))

    def _excite(self, d):
        return self.excite(d)


class PixelAttention(_Branch):
    kind = "pixel"

    def __init__(self, channels, expand_ratio=EXPAND_RATIO, squeeze_ratio=SQUEEZE_RATIO, name="pa"):
        super().__init__(name)
        self.channels = channels
        wide = channels * expand_ratio
        narrow = squeeze_width(channels, squeeze_ratio)
        self.expand = nn.Conv2d(channels, wide, 1)
        self.restore = nn.Conv2d(wide, channels, 1)
        self.squeeze = nn.Conv2d(channels, narrow, 1)
        self.excite = nn.Conv2d(narrow, channels, 1)

    def describe(self, f):
        return f

    describe_again = describe

    def _expand(self, d):
        return F.relu(self.expand(d))

    def _restore(self, d):
        return self.restore(d)

    def _squeeze(self, d):
        return F.relu(self.squeeze(d))

    def _excite(self, d):
        return self.excite(d)


class TAU(nn.Module):
    """Tri-level attention unit. Output has the input's shape."""

    def __init__(self, channels, expand_ratio=EXPAND_RATIO, squeeze_ratio=SQUEEZE_RATIO,
                 spatial_kernel=7, name="tau"):
        super().__init__()
        self.name = name
        self.channels = channels
        self.ca = ChannelAttention(channels, expand_ratio, squeeze_ratio, name=f"{name}.ca")
        self.sa = SpatialAttention(channels, spatial_kernel, expand_ratio, name=f"{name}.sa")
        self.pa = PixelAttention(channels, expand_ratio, squeeze_ratio, name=f"{name}.pa")
        # alpha = sigmoid(blend_raw); starts at 0.5
        self.blend_raw = nn.Parameter(torch.zeros(()))
        init_weights(self)

    @property
    def alpha(self):
        return torch.sigmoid(self.blend_raw)

    def mask(self, f):
        return tau_mask(self.ca(f), self.sa(f), self.pa(f))

    def forward(self, f):
        gated = f * self.mask(f)
        alpha = self.alpha
        out = alpha * f + (1 - alpha) * gated
        _check_finite(out, self.name)
        return out

