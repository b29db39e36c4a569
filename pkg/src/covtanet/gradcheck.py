"""Central finite-difference checks of autograd gradients in double precision."""
from dataclasses import dataclass

import numpy as np
import torch

from .attention import TAU
from .errors import ConfigError
from .losses import LossConfig, binary_cross_entropy, focal_tversky, joint_loss
from .regional import RegionalExtractor
from .segnet import SegNetConfig, TASegNet
from .volumetric import JointClassifier

STEP = 1e-5
TOLERANCE = {"attention": 1e-4, "losses": 1e-5, "segnet": 1e-3, "regional": 1e-3, "volumetric": 1e-3}


def relative_error(analytic, numeric, noise=0.0):
    """``max(|a - n| - noise) / max(|a|, |n|)`` over one parameter group.

    ``noise`` is the resolution of the finite difference itself; disagreement
    below it carries no information. Returns 0 when both gradients vanish.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), noise)
    if scale == 0:
        return 0.0
    return float(np.clip(np.abs(a - n) - noise, 0, None).max() / scale)


def numeric_grad(fn, tensor, index, step=STEP):
    """Central difference of scalar ``fn()`` w.r.t. the flat entries ``index`` of ``tensor``."""
    flat = tensor.data.view(-1)
    out = np.empty(len(index))
    with torch.no_grad():
        for j, i in enumerate(index):
            orig = flat[i].item()
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            out[j] = (up - down) / (2 * step)
    return out


def fd_noise(value, step=STEP):
    """Roundoff floor of a central difference of a function of magnitude ``value``."""
    return 4 * np.finfo(np.float64).eps * max(abs(value), 1.0) / (2 * step)


@dataclass
class GroupResult:
    error: float
    checked: int
    kinks: int   # entries excluded because the difference straddles a non-differentiable point


def check_groups(fn, groups, fraction=1.0, rng=None, min_entries=3, step=STEP, tol=1e-4):
    """Compare autograd and central differences for every named tensor in ``groups``.

    ``fraction`` < 1 samples that share of each tensor's entries (at least
    ``min_entries``). An entry whose central difference moves by more than
    ``tol`` (relative to the group scale) between ``step`` and ``step / 2``
    sits next to a ReLU or max-pool switch; it is counted as a kink and left
    out of the error. Returns ``{name: GroupResult}``.
    """
    rng = rng or np.random.default_rng(0)
    for t in groups.values():
        t.grad = None
    value = fn()
    value.backward()
    noise = fd_noise(value.item(), step)
    report = {}
    for name, t in groups.items():
        analytic = (t.grad if t.grad is not None else torch.zeros_like(t)).reshape(-1).numpy()
        n = t.numel()
        if fraction >= 1:
            index = np.arange(n)
        else:
            k = min(n, max(min_entries, int(round(fraction * n))))
            index = np.sort(rng.choice(n, size=k, replace=False))
        numeric = numeric_grad(fn, t, index, step)
        half = numeric_grad(fn, t, index, step / 2)
        a = analytic[index]
        scale = max(np.abs(a).max(), np.abs(numeric).max(), 2 * noise)
        smooth = np.abs(numeric - half) <= tol * scale + 2 * noise
        report[name] = GroupResult(relative_error(a[smooth], numeric[smooth], noise),
                                   int(smooth.sum()), int((~smooth).sum()))
    return report


def _generic_point(module, blend=0.3, bias=0.1):
    # zero biases put ReLU inputs exactly on the kink wherever features vanish
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("blend_raw"):
                p.fill_(blend)
            elif name.endswith("bias"):
                p.uniform_(-bias, bias)
    return module


def _projection(out, gen):
    # fixed random weights turn a tensor output into a scalar with a generic gradient
    return torch.randn(out.shape, generator=gen, dtype=out.dtype)


def check_attention(seed=0, shape=(2, 4, 8, 8)):
    torch.manual_seed(seed)
    tau = _generic_point(TAU(shape[1]).double())
    gen = torch.Generator().manual_seed(seed + 1)
    f = torch.randn(shape, generator=gen, dtype=torch.float64, requires_grad=True)
    w = _projection(f, gen)

    def fn():
        return (tau(f) * w).sum()

    groups = dict(tau.named_parameters())
    groups["input"] = f
    return check_groups(fn, groups, tol=TOLERANCE["attention"])


def check_losses(seed=0):
    gen = torch.Generator().manual_seed(seed)
    pred = torch.rand((3, 1, 6, 6), generator=gen, dtype=torch.float64) * 0.9 + 0.05
    pred.requires_grad_(True)
    truth = (torch.rand((3, 1, 6, 6), generator=gen, dtype=torch.float64) > 0.5).double()
    cfg = LossConfig()
    tol = TOLERANCE["losses"]
    report = check_groups(lambda: focal_tversky(pred, truth, cfg), {"focal_tversky.pred": pred}, tol=tol)

    p = (torch.rand(5, generator=gen, dtype=torch.float64) * 0.9 + 0.05).requires_grad_(True)
    y = (torch.rand(5, generator=gen) > 0.5).double()
    report.update(check_groups(lambda: binary_cross_entropy(p, y).sum(), {"bce.p": p}, tol=tol))

    yd = torch.tensor([1.0, 0.0, 1.0, 1.0, 0.0], dtype=torch.float64)
    ys = torch.tensor([1.0, 0.0, 0.0, 1.0, 1.0], dtype=torch.float64)
    pd = (torch.rand(5, generator=gen, dtype=torch.float64) * 0.9 + 0.05).requires_grad_(True)
    ps = (torch.rand(5, generator=gen, dtype=torch.float64) * 0.9 + 0.05).requires_grad_(True)
    report.update(check_groups(lambda: joint_loss(yd, pd, ys, ps),
                               {"joint.p_diagnosis": pd, "joint.p_severity": ps}, tol=tol))
    return report


def check_segnet(seed=0, fraction=0.01, size=16):
    torch.manual_seed(seed)
    cfg = SegNetConfig(levels=2, channels=(4, 8), fused_channels=4, input_size=(size, size))
    net = _generic_point(TASegNet(cfg).double())
    gen = torch.Generator().manual_seed(seed + 1)
    x = torch.rand((2, 1, size, size), generator=gen, dtype=torch.float64)
    truth = (torch.rand((2, 1, size, size), generator=gen) > 0.6).double()

    def fn():
        return focal_tversky(net(x).prob_mask, truth)

    rng = np.random.default_rng(seed)
    return check_groups(fn, dict(net.named_parameters()), fraction, rng, tol=TOLERANCE["segnet"])


def check_regional(seed=0, fraction=0.05):
    torch.manual_seed(seed)
    net = _generic_point(RegionalExtractor(4, stages=2, cap=8).double())
    gen = torch.Generator().manual_seed(seed + 1)
    f = torch.rand((2, 4, 8, 8), generator=gen, dtype=torch.float64)
    w = _projection(net(f), gen)
    rng = np.random.default_rng(seed)
    return check_groups(lambda: (net(f) * w).sum(), dict(net.named_parameters()), fraction, rng, tol=TOLERANCE["regional"])


def check_volumetric(seed=0, fraction=0.05):
    torch.manual_seed(seed)
    clf = _generic_point(JointClassifier(4, slices=2, stages=1, cap=8, reduced=8, hidden=8).double())
    gen = torch.Generator().manual_seed(seed + 1)
    f = torch.rand((2, 2, 4, 12, 12), generator=gen, dtype=torch.float64)
    yd = torch.tensor([1.0, 0.0], dtype=torch.float64)
    ys = torch.tensor([1.0, 0.0], dtype=torch.float64)

    def fn():
        pd, ps = clf(f)
        return joint_loss(yd, pd, ys, ps)

    rng = np.random.default_rng(seed)
    return check_groups(fn, dict(clf.named_parameters()), fraction, rng, tol=TOLERANCE["volumetric"])


CHECKS = {
    "attention": check_attention,
    "losses": check_losses,
    "segnet": check_segnet,
    "regional": check_regional,
    "volumetric": check_volumetric,
}


def grad_check(module, seed=0):
    """Run one named check; returns ``{"module", "tolerance", "groups", "max_error", "passed"}``."""
    try:
        check = CHECKS[module]
    except KeyError:
        raise ConfigError(f"unknown module {module!r}; choose from {sorted(CHECKS)}")
    groups = check(seed=seed)
    worst = max((g.error for g in groups.values()), default=0.0)
    tol = TOLERANCE[module]
    return {"module": module, "tolerance": tol, "groups": groups, "max_error": worst,
            "checked": sum(g.checked for g in groups.values()),
            "kinks": sum(g.kinks for g in groups.values()), "passed": worst <= tol}


def format_report(report):
    lines = [f"{report['module']}: max rel err {report['max_error']:.3e} "
             f"(tol {report['tolerance']:.0e}) over {report['checked']} entries, "
             f"{report['kinks']} kinks skipped: {'PASS' if report['passed'] else 'FAIL'}"]
    for name, g in report["groups"].items():
        lines.append(f"  {name:<48s} {g.error:.3e}  n={g.checked}" + (f" kinks={g.kinks}" if g.kinks else ""))
    return "\n".join(lines)
