import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from covtanet.errors import ConfigError, InvalidShapeError
from covtanet.losses import focal_tversky
from covtanet.segnet import ABLATIONS, SegNetConfig, TASegNet, bilinear_upsample, count_parameters

SMALL = dict(levels=3, channels=(4, 8, 16), fused_channels=4, input_size=(32, 32))


def test_encode_shapes_default():
    net = TASegNet(SegNetConfig())
    enc = net.encode(torch.rand(1, 1, 64, 64))
    assert [tuple(e.shape[1:]) for e in enc] == [(16, 64, 64), (32, 32, 32), (64, 16, 16), (128, 8, 8)]


def test_encode_zero_input_zero_bias():
    net = TASegNet(SegNetConfig(**SMALL))
    assert all(torch.all(e == 0) for e in net.encode(torch.zeros(2, 1, 32, 32)))


def test_encode_random_finite():
    net = TASegNet(SegNetConfig(**SMALL))
    assert all(torch.isfinite(e).all() for e in net.encode(torch.rand(2, 1, 32, 32)))


def test_indivisible_size():
    with pytest.raises(ConfigError):
        SegNetConfig(levels=4, channels=(4, 8, 16, 32), input_size=(60, 64))
    net = TASegNet(SegNetConfig(**SMALL))
    with pytest.raises(ConfigError):
        net(torch.rand(1, 1, 30, 32))


def test_channels_must_increase():
    with pytest.raises(ConfigError):
        SegNetConfig(levels=3, channels=(8, 8, 16))
    with pytest.raises(ConfigError):
        SegNetConfig(levels=3, channels=(4, 8))


def test_v1_is_plain_encoder_decoder():
    net = TASegNet(SegNetConfig.ablation("V1", **SMALL))
    assert net.encoder_taus is None and net.decoder_taus is None and net.reducers is None
    x = torch.rand(2, 1, 32, 32)
    enc = net.encode(x)
    assert net.gate_skips(enc) == enc
    out = net(x)
    # the head reads D_1 directly
    np.testing.assert_array_equal(out.fusion.detach(), net.decode(enc)[0].detach())
    with pytest.raises(ConfigError):
        net.fuse(enc, net.decode(enc))


def test_decode_zero_in_zero_out():
    net = TASegNet(SegNetConfig(**SMALL))
    enc = [torch.zeros(1, c, 32 >> i, 32 >> i) for i, c in enumerate(SMALL["channels"])]
    assert all(torch.all(d == 0) for d in net.decode(enc))


def test_decode_mirrors_encoder():
    net = TASegNet(SegNetConfig(**SMALL))
    enc = net.encode(torch.rand(2, 1, 32, 32))
    dec = net.decode(enc)
    assert [d.shape for d in dec] == [e.shape for e in enc]
    with pytest.raises(InvalidShapeError):
        net.decode(enc[:2])


def test_fusion_channels():
    cfg = SegNetConfig(levels=4, channels=(4, 8, 16, 32), fused_channels=16, input_size=(16, 16))
    out = TASegNet(cfg)(torch.rand(1, 1, 16, 16))
    assert cfg.fusion_channels == 64
    assert out.fusion.shape == (1, 64, 16, 16)


def test_bilinear_hand_values():
    x = torch.tensor([[[[0.0, 1.0], [1.0, 0.0]]]], dtype=torch.float64)
    got = bilinear_upsample(x, (4, 4))[0, 0].numpy()
    hand = np.array([[(1 - i / 3) * (j / 3) + (i / 3) * (1 - j / 3) for j in range(4)] for i in range(4)])
    np.testing.assert_allclose(got, hand, atol=1e-15)
    np.testing.assert_allclose(got, oracles.bilinear_corners(x[0, 0].numpy(), 4, 4), atol=1e-15)
    assert got[1, 1] == pytest.approx(4 / 9)


def test_bilinear_random_against_formula():
    x = torch.rand(1, 1, 3, 5, dtype=torch.float64)
    got = bilinear_upsample(x, (12, 20))[0, 0].numpy()
    np.testing.assert_allclose(got, oracles.bilinear_corners(x[0, 0].numpy(), 12, 20), atol=1e-14)


def test_bilinear_identity_at_full_size():
    x = torch.rand(1, 2, 8, 8)
    assert bilinear_upsample(x, (8, 8)) is x


def test_zero_head_gives_half():
    net = TASegNet(SegNetConfig(**SMALL))
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.zero_()
    assert torch.all(net(torch.rand(2, 1, 32, 32)).prob_mask == 0.5)


def test_binary_mask_threshold():
    net = TASegNet(SegNetConfig(**SMALL))
    out = net(torch.rand(1, 1, 32, 32))
    assert torch.equal(out.binary_mask(), (out.prob_mask > 0.5).to(torch.uint8))


def test_config_round_trip():
    cfg = SegNetConfig.ablation("V5", **SMALL)
    assert SegNetConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        SegNetConfig.ablation("V8")


def test_pluggable_encoder():
    cfg = SegNetConfig(**SMALL)

    class Stub(torch.nn.Module):
        def forward(self, x):
            return [torch.ones(x.shape[0], c, 32 >> i, 32 >> i) for i, c in enumerate(cfg.channels)]

    net = TASegNet(cfg, encoder=Stub())
    assert net(torch.rand(2, 1, 32, 32)).prob_mask.shape == (2, 1, 32, 32)

    class Wrong(torch.nn.Module):
        def forward(self, x):
            return [torch.ones(x.shape[0], 3, 32, 32)] * 3

    with pytest.raises(InvalidShapeError):
        TASegNet(cfg, encoder=Wrong())(torch.rand(1, 1, 32, 32))


def test_tau_toggles_raise_parameter_count():
    names = ("encoder_tau", "decoder_tau", "encoder_in_fusion", "decoder_in_fusion")
    for bits in itertools.product((False, True), repeat=4):
        base = dict(zip(names, bits))
        for tau in ("encoder_tau", "decoder_tau"):
            if base[tau]:
                continue
            off = TASegNet(SegNetConfig(**SMALL, **base))
            on = TASegNet(SegNetConfig(**SMALL, **{**base, tau: True}))
            if tau == "decoder_tau" and not on.has_decoder:
                assert count_parameters(on) == count_parameters(off)
            else:
                assert count_parameters(on) > count_parameters(off)


def test_encoder_only_fusion_has_no_decoder():
    net = TASegNet(SegNetConfig.ablation("V4", **SMALL))
    assert net.decoder_blocks is None and net.decoder_taus is None
    enc = net.encode(torch.rand(1, 1, 32, 32))
    with pytest.raises(ConfigError):
        net.decode(enc)
    assert net(torch.rand(1, 1, 32, 32)).fusion.shape == (1, 12, 32, 32)


@pytest.mark.parametrize("version", sorted(ABLATIONS))
def test_ablation_forward_backward(version):
    net = TASegNet(SegNetConfig.ablation(version, **SMALL))
    x = torch.rand(2, 1, 32, 32)
    loss = focal_tversky(net(x).prob_mask, (x > 0.7).float())
    loss.backward()
    assert all(p.grad is not None and torch.isfinite(p.grad).all() for p in net.parameters())


def _ten_steps(seed):
    torch.manual_seed(seed)
    net = TASegNet(SegNetConfig(levels=2, channels=(4, 8), fused_channels=4, input_size=(16, 16)))
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(4, 1, 16, 16, generator=gen)
    y = (torch.rand(4, 1, 16, 16, generator=gen) > 0.7).float()
    for _ in range(10):
        opt.zero_grad()
        focal_tversky(net(x).prob_mask, y).backward()
        opt.step()
    return [p.detach().clone() for p in net.parameters()]


def test_seeded_training_is_bitwise_reproducible():
    a, b = _ten_steps(5), _ten_steps(5)
    assert all(torch.equal(p, q) for p, q in zip(a, b))


@settings(max_examples=60, deadline=None)
@given(levels=st.integers(2, 4), base=st.sampled_from([4, 6, 8]), cu=st.integers(1, 6),
       mult=st.tuples(st.integers(1, 3), st.integers(1, 3)), batch=st.integers(1, 2),
       toggles=st.tuples(*[st.booleans()] * 4), seed=st.integers(0, 1000))
def test_resolution_and_fusion_width(levels, base, cu, mult, batch, toggles, seed):
    step = 2 ** (levels - 1)
    size = (step * mult[0], step * mult[1])
    cfg = SegNetConfig(levels=levels, channels=tuple(base * 2 ** i for i in range(levels)), fused_channels=cu,
                       input_size=size, encoder_tau=toggles[0], decoder_tau=toggles[1],
                       encoder_in_fusion=toggles[2], decoder_in_fusion=toggles[3])
    torch.manual_seed(seed)
    net = TASegNet(cfg)
    x = torch.rand(batch, 1, *size)
    out = net(x)
    assert out.prob_mask.shape == (batch, 1, *size)
    assert torch.all((out.prob_mask > 0) & (out.prob_mask < 1))
    want = levels * cu if cfg.uses_fusion else base
    assert out.fusion.shape == (batch, want, *size)
    for tau in list(net.encoder_taus or []) + list(net.decoder_taus or []):
        e = torch.rand(batch, tau.channels, *size)
        m = tau.mask(e)
        assert torch.all((m > 0) & (m < 1))
