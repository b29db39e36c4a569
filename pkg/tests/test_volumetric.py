import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from conftest import numpy_params, randomize
from covtanet.errors import ConfigError, InvalidShapeError
from covtanet.losses import joint_loss
from covtanet.regional import RegionalExtractor, stage_widths
from covtanet.volumetric import JointClassifier, VolumetricPath, check_dilation_extent


# -- regional extractor

def test_regional_shape_with_cap():
    rf = RegionalExtractor(64, stages=3, cap=128)
    assert stage_widths(64, 3, 128) == [128, 128, 128]
    assert rf.output_shape((64, 64)) == (128, 8, 8)
    assert rf(torch.rand(1, 64, 64, 64)).shape == (1, 128, 8, 8)


def test_regional_widths_double():
    assert stage_widths(4, 3, 128) == [8, 16, 32]
    assert RegionalExtractor(4, 3).output_shape((16, 16)) == (32, 2, 2)


def test_regional_zero_input():
    rf = RegionalExtractor(4, stages=2, cap=16)
    assert torch.all(rf(torch.zeros(2, 4, 8, 8)) == 0)


def test_regional_indivisible():
    rf = RegionalExtractor(4, stages=3)
    with pytest.raises(ConfigError):
        rf(torch.rand(1, 4, 12, 12))
    with pytest.raises(InvalidShapeError):
        rf(torch.rand(1, 5, 16, 16))


def test_regional_matches_composed_oracles():
    rf = randomize(RegionalExtractor(4, stages=2, cap=16).double(), 3, scale=0.3)
    f = torch.rand(2, 4, 8, 8, dtype=torch.float64)
    p = numpy_params(rf)
    x = f.numpy()
    for k in range(2):
        x = oracles.relu(oracles.conv2d(x, p[f"convs.{k}.weight"], p[f"convs.{k}.bias"]))
        x = oracles.maxpool2(oracles.tau(x, p, f"taus.{k}."))
    np.testing.assert_allclose(rf(f).detach().numpy(), x, rtol=0, atol=1e-10)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000), scale=st.floats(0, 5))
def test_regional_shape_independent_of_content(seed, scale):
    rf = RegionalExtractor(4, stages=2, cap=16)
    x = torch.rand(1, 4, 16, 16, generator=torch.Generator().manual_seed(seed)) * scale
    assert rf(x).shape == (1, *rf.output_shape((16, 16)))


# -- volumetric paths

def small_path(**kw):
    return VolumetricPath(8, slices=2, reduced=4, hidden=4, **kw)


def test_aggregate_channels():
    path = small_path()
    agg = path.aggregate(torch.rand(3, 2, 8, 8, 8))
    assert agg.shape == (3, 16, 8, 8)


def test_aggregate_zero():
    assert torch.all(small_path().aggregate(torch.zeros(1, 2, 8, 8, 8)) == 0)


def test_aggregate_slice_count_mismatch():
    with pytest.raises(InvalidShapeError):
        small_path().aggregate(torch.rand(1, 3, 8, 8, 8))


def test_aggregate_block_permutation():
    path = randomize(small_path().double(), 0, scale=0.3)
    reg = torch.rand(1, 2, 8, 5, 5, dtype=torch.float64)
    a = path.aggregate(reg)
    b = path.aggregate(reg[:, [1, 0]])
    # equal up to batch-position rounding inside the convolutions
    torch.testing.assert_close(b[:, :8], a[:, 8:], rtol=0, atol=1e-14)
    torch.testing.assert_close(b[:, 8:], a[:, :8], rtol=0, atol=1e-14)


def test_fuse_dilated_zero():
    assert torch.all(small_path().fuse_dilated(torch.zeros(2, 16, 8, 8)) == 0)


def test_fuse_dilated_matches_loops():
    path = randomize(small_path().double(), 1, scale=0.3)
    p = numpy_params(path)
    agg = torch.rand(1, 16, 8, 8, dtype=torch.float64)
    x = oracles.relu(oracles.conv2d(agg.numpy(), p["reduce.weight"], p["reduce.bias"]))
    s = sum(oracles.conv2d(x, p[f"dilated.{k}.weight"], p[f"dilated.{k}.bias"], dilation=r)
            for k, r in enumerate((1, 2, 4)))
    x = oracles.relu(oracles.conv2d(oracles.relu(s), p["merge.weight"], p["merge.bias"]))
    want = x.mean(axis=(2, 3))
    np.testing.assert_allclose(path.fuse_dilated(agg).detach().numpy(), want, atol=1e-12)


def test_rate2_dilation_matches_loop():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 3, 8, 8))
    conv = torch.nn.Conv2d(3, 2, 3, padding=2, dilation=2).double()
    got = conv(torch.from_numpy(x)).detach().numpy()
    want = oracles.conv2d(x, conv.weight.detach().numpy(), conv.bias.detach().numpy(), dilation=2)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_constant_input_interior_equals_rate1():
    rng = np.random.default_rng(5)
    w = torch.from_numpy(rng.standard_normal((1, 1, 3, 3)))
    x = torch.full((1, 1, 16, 16), 2.0, dtype=torch.float64)
    outs = [torch.nn.functional.conv2d(x, w, padding=r, dilation=r) for r in (1, 2, 4)]
    for o in outs[1:]:
        assert torch.allclose(o[..., 4:-4, 4:-4], outs[0][..., 4:-4, 4:-4], atol=1e-12)


def test_dilation_extent_rule():
    check_dilation_extent((5, 5))
    with pytest.raises(ConfigError):
        check_dilation_extent((4, 8))
    with pytest.raises(ConfigError):
        small_path().fuse_dilated(torch.rand(1, 16, 2, 2))


# -- joint classifier

def tiny_classifier(**kw):
    return JointClassifier(4, slices=2, stages=1, cap=8, reduced=4, hidden=4, **kw)


def test_zero_final_layer_gives_half():
    clf = tiny_classifier()
    with torch.no_grad():
        for path in (clf.diagnosis, clf.severity):
            path.fc2.weight.zero_()
            path.fc2.bias.zero_()
    pd, ps = clf(torch.rand(3, 2, 4, 12, 12))
    assert torch.all(pd == 0.5) and torch.all(ps == 0.5)


def test_paths_share_no_parameters():
    clf = tiny_classifier()
    d = {id(p) for p in clf.diagnosis.parameters()}
    s = {id(p) for p in clf.severity.parameters()}
    assert not d & s


def test_path_isolation_gradients():
    clf = tiny_classifier().double()
    f = torch.rand(2, 2, 4, 12, 12, dtype=torch.float64)
    pd, ps = clf(f)
    grads = torch.autograd.grad(pd.sum(), list(clf.severity.parameters()), allow_unused=True)
    assert all(g is None or torch.all(g == 0) for g in grads)
    grads = torch.autograd.grad(ps.sum(), list(clf.diagnosis.parameters()), allow_unused=True)
    assert all(g is None or torch.all(g == 0) for g in grads)


def test_all_normal_batch_gives_no_severity_gradient():
    clf = tiny_classifier().double()
    pd, ps = clf(torch.rand(2, 2, 4, 12, 12, dtype=torch.float64))
    loss = joint_loss(torch.zeros(2), pd, torch.ones(2), ps)
    loss.backward()
    assert all(p.grad is None or torch.all(p.grad == 0) for p in clf.severity.parameters())


def test_classifier_slice_mismatch():
    with pytest.raises(InvalidShapeError):
        tiny_classifier()(torch.rand(1, 3, 4, 12, 12))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10 ** 4), scale=st.floats(0, 3))
def test_probabilities_in_open_interval(seed, scale):
    torch.manual_seed(seed)
    clf = tiny_classifier().double()
    f = torch.rand(2, 2, 4, 12, 12, dtype=torch.float64) * scale
    pd, ps = clf(f)
    assert torch.all((pd > 0) & (pd < 1)) and torch.all((ps > 0) & (ps < 1))
