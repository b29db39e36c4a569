"""Focal Tversky segmentation loss and the joint diagnosis/severity objective."""
import math
from dataclasses import dataclass

import torch

from .errors import ConfigError, DomainError, InvalidInputError, InvalidShapeError

BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    tversky_alpha: float = 0.7   # weight on false negatives
    tversky_beta: float = 0.3    # weight on false positives
    focal_gamma: float = 4 / 3
    smooth: float = 1.0

    def __post_init__(self):
        a, b = self.tversky_alpha, self.tversky_beta
        if not (0 <= a <= 1 and 0 <= b <= 1) or not math.isclose(a + b, 1.0, abs_tol=1e-12):
            raise ConfigError(f"Tversky weights must lie in [0, 1] and sum to 1, got {a}, {b}")
        if self.focal_gamma <= 0 or self.smooth <= 0:
            raise ConfigError("focal_gamma and smooth must be positive")


def tversky_index(pred, truth, cfg=LossConfig()):
    """Soft Tversky index per sample (leading axis); all other axes are summed."""
    if pred.shape != truth.shape:
        raise InvalidShapeError(f"prediction {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    if pred.numel() and (pred.min() < 0 or pred.max() > 1):
        raise DomainError("predictions must lie in [0, 1]")
    truth = truth.to(pred.dtype)
    dims = tuple(range(1, pred.dim()))
    tp = (pred * truth).sum(dims)
    fn = ((1 - pred) * truth).sum(dims)
    fp = (pred * (1 - truth)).sum(dims)
    s = cfg.smooth
    return (tp + s) / (tp + cfg.tversky_alpha * fn + cfg.tversky_beta * fp + s)


def focal_tversky(pred, truth, cfg=LossConfig()):
    """Mean over samples of ``(1 - TI) ** (1 / gamma)``; lies in [0, 1]."""
    ti = tversky_index(pred, truth, cfg)
    # clamp: TI can round a hair above 1. The power has an infinite slope at 0, so
    # exact zeros take a zero gradient instead of inf * 0 = nan (nan itself still propagates)
    d = (1 - ti).clamp_min(0)
    zero = d == 0
    return torch.where(zero, 0.0, torch.where(zero, 1.0, d).pow(1 / cfg.focal_gamma)).mean()


def binary_cross_entropy(p, y, eps=BCE_CLAMP):
    """Elementwise BCE with ``p`` clamped to [eps, 1 - eps]."""
    p = torch.as_tensor(p)
    y = torch.as_tensor(y, dtype=p.dtype)
    p = p.clamp(eps, 1 - eps)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p))


def joint_loss(yd, pd, ys, ps, eps=BCE_CLAMP, components=False):
    """Diagnosis BCE averaged over all volumes plus severity BCE averaged over infected ones.

    ``ys`` entries for normal volumes are ignored (any placeholder value works).
    With no infected volumes the severity term is 0.
    """
    pd = torch.as_tensor(pd)
    ps = torch.as_tensor(ps)
    yd = torch.as_tensor(yd, dtype=pd.dtype)
    ys = torch.as_tensor(ys, dtype=ps.dtype)
    if not (yd.shape == pd.shape == ys.shape == ps.shape) or yd.dim() != 1:
        raise InvalidShapeError("joint loss inputs must be aligned 1-D sequences")
    m = yd.numel()
    if m == 0:
        raise InvalidInputError("joint loss needs at least one volume")
    diag = binary_cross_entropy(pd, yd, eps).sum() / m
    infected = yd > 0.5
    m_i = int(infected.sum())
    if m_i:
        sev = (yd[infected] * binary_cross_entropy(ps[infected], ys[infected], eps)).sum() / m_i
    else:
        sev = ps.sum() * 0
    total = diag + sev
    if components:
        return total, diag, sev
    return total
