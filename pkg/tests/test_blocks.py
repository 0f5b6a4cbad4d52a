import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from conftest import central_difference_check
from dyolo.adaption import (AdaptionLossConfig, FABlock, FeatureAdapter, cwd_loss, mimic_loss,
                            multiscale_adaption_loss)
from dyolo.fusion import AttentionFusion
from dyolo.odconv import CBAM, ODConv2d, SEConv2d, make_conv


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


# --- ODConv -----------------------------------------------------------------


def test_odconv_attention_ranges():
    m = ODConv2d(6, 5, 3, n_kernels=4)
    a_s, a_c, a_f, a_w = m.attentions(torch.randn(3, 6, 7, 7) * 5)
    assert a_s.shape == (3, 3, 3) and a_c.shape == (3, 6) and a_f.shape == (3, 5) and a_w.shape == (3, 4)
    torch.testing.assert_close(a_w.sum(1), torch.ones(3), atol=1e-6, rtol=0)
    for a in (a_s, a_c, a_f):
        assert torch.all((a > 0) & (a < 1))


def test_odconv_identical_samples_identical_attention():
    m = ODConv2d(4, 4, 1)
    x = torch.randn(1, 4, 5, 5)
    atts = m.attentions(torch.cat([x, x]))
    for a in atts:
        assert torch.equal(a[0], a[1])


def test_odconv_degenerates_to_plain_conv():
    for k in (1, 3):
        m = ODConv2d(4, 6, k, n_kernels=1).double()
        m.pin_attention = True
        x = torch.randn(2, 4, 9, 9, dtype=torch.float64)
        ref = F.conv2d(x, m.weight[0], m.bias, padding=k // 2)
        assert (m(x) - ref).abs().max().item() <= 1e-6


def test_odconv_zero_input_gives_bias():
    m = ODConv2d(3, 5, 3)
    with torch.no_grad():
        m.bias.copy_(torch.arange(5.0))
    y = m(torch.zeros(2, 3, 6, 6))
    torch.testing.assert_close(y, torch.arange(5.0).view(1, 5, 1, 1).expand(2, 5, 6, 6))


def test_odconv_shape_and_errors():
    m = ODConv2d(8, 16, 1)
    assert m(torch.randn(2, 8, 5, 7)).shape == (2, 16, 5, 7)
    with pytest.raises(ValueError):
        m(torch.randn(2, 7, 5, 5))
    with pytest.raises(ValueError):
        ODConv2d(2, 2, n_kernels=0)


def test_odconv_gradcheck():
    m = ODConv2d(2, 3, 1, n_kernels=2, min_hidden=2).double()
    x = torch.randn(1, 2, 3, 3, dtype=torch.float64, requires_grad=True)
    params = [p for p in m.parameters()]
    assert central_difference_check(lambda: m(x), [x, *params]) <= 1e-3


def test_conv_factory():
    assert isinstance(make_conv("od", 2, 3), ODConv2d)
    assert isinstance(make_conv("se", 2, 3), SEConv2d)
    assert isinstance(make_conv("plain", 2, 3), torch.nn.Conv2d)
    with pytest.raises(ValueError):
        make_conv("skc", 2, 3)


# --- CBAM -------------------------------------------------------------------


def test_cbam_constant_input_gives_constant_spatial_map():
    m = CBAM(32)
    x = torch.rand(2, 32, 1, 1).expand(2, 32, 10, 10).contiguous()
    xc = x * m.channel_attention(x)
    pooled_avg, pooled_max = xc.mean(1), xc.amax(1)
    torch.testing.assert_close(pooled_avg, pooled_avg[:, :1, :1].expand_as(pooled_avg))
    torch.testing.assert_close(pooled_max, pooled_max[:, :1, :1].expand_as(pooled_max))
    sa = m.spatial_attention(xc)
    inner = sa[..., 3:7, 3:7]  # 7×7 window fully inside the image
    torch.testing.assert_close(inner, inner[..., :1, :1].expand_as(inner))


def test_cbam_bounds():
    m = CBAM(16)
    x = torch.rand(3, 16, 8, 8)
    y = m(x)
    assert y.shape == x.shape
    assert torch.all(y.abs() <= x.abs())
    assert torch.all((m.channel_attention(x) > 0) & (m.channel_attention(x) < 1))
    with pytest.raises(ValueError):
        m(torch.rand(1, 8, 4, 4))


def test_cbam_gradcheck():
    m = CBAM(4, reduction=2, kernel_size=3).double()
    x = torch.randn(1, 4, 4, 4, dtype=torch.float64, requires_grad=True)
    assert central_difference_check(lambda: m(x), [x, *m.parameters()]) <= 1e-3


def test_se_conv_shapes():
    m = SEConv2d(6, 12)
    assert m(torch.randn(2, 6, 4, 4)).shape == (2, 12, 4, 4)


# --- feature adaption -------------------------------------------------------


@pytest.mark.parametrize("kind", ["od", "plain", "se"])
def test_fa_shape(kind):
    blk = FABlock(64, kind)
    x = torch.randn(2, 64, 8, 8)
    assert blk(x).shape == x.shape
    ad = FeatureAdapter((8, 16, 32), kind)
    pyr = [torch.randn(2, 8, 8, 8), torch.randn(2, 16, 4, 4), torch.randn(2, 32, 2, 2)]
    assert [f.shape for f in ad(pyr)] == [f.shape for f in pyr]


def test_fa_pure_and_errors():
    blk = FABlock(4).eval()
    x = torch.randn(2, 4, 5, 5)
    assert torch.equal(blk(x), blk(x))
    with pytest.raises(ValueError):
        blk(torch.randn(1, 5, 5, 5))


def test_fa_gradcheck():
    blk = FABlock(4, "od", n_kernels=2, cbam_reduction=2).double()
    x = torch.randn(1, 4, 5, 5, dtype=torch.float64, requires_grad=True)
    assert central_difference_check(lambda: blk(x), [x, *blk.parameters()]) <= 1e-3


# --- losses -----------------------------------------------------------------


def test_cwd_zero_at_equality():
    f = torch.randn(3, 5, 4, 4, dtype=torch.float64)
    assert cwd_loss(f, f.clone()).item() == 0.0


def test_cwd_hand_case():
    f_c = torch.tensor([0.0, math.log(2)], dtype=torch.float64).view(1, 1, 1, 2)
    f_d = torch.zeros(1, 1, 1, 2, dtype=torch.float64)
    assert cwd_loss(f_c, f_d, 1.0).item() == pytest.approx(0.056633012265132426, abs=1e-12)


def _cwd_naive(f_c, f_d, tau):
    n, c = f_c.shape[:2]
    total = 0.0
    for i in range(c):
        acc = 0.0
        for j in range(n):
            a = f_c[j, i].reshape(-1).tolist()
            b = f_d[j, i].reshape(-1).tolist()
            za = sum(math.exp(v / tau) for v in a)
            zb = sum(math.exp(v / tau) for v in b)
            for u, v in zip(a, b):
                p, q = math.exp(u / tau) / za, math.exp(v / tau) / zb
                acc += p * (math.log(p) - math.log(q))
        total += acc / n
    return total * tau**2


@pytest.mark.parametrize("tau", [0.5, 1.0, 2.0, 10.0])
def test_cwd_matches_naive(tau):
    g = torch.Generator().manual_seed(7)
    f_c = torch.randn(2, 3, 3, 4, generator=g, dtype=torch.float64)
    f_d = torch.randn(2, 3, 3, 4, generator=g, dtype=torch.float64)
    assert cwd_loss(f_c, f_d, tau).item() == pytest.approx(_cwd_naive(f_c, f_d, tau), rel=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_cwd_nonneg_and_shift_invariant(seed, shift):
    g = torch.Generator().manual_seed(seed)
    f_c = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64) * 3
    f_d = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64) * 3
    base = cwd_loss(f_c, f_d)
    assert base.item() >= 0
    f_c2, f_d2 = f_c.clone(), f_d.clone()
    f_c2[:, 1] += shift
    f_d2[:, 1] += shift
    assert abs(cwd_loss(f_c2, f_d2).item() - base.item()) <= 1e-9


def test_cwd_target_detached_and_gradcheck():
    f_c = torch.randn(1, 2, 3, 3, dtype=torch.float64, requires_grad=True)
    f_d = torch.randn(1, 2, 3, 3, dtype=torch.float64, requires_grad=True)
    cwd_loss(f_c, f_d).backward()
    assert f_c.grad is None and f_d.grad is not None
    assert central_difference_check(lambda: cwd_loss(f_c, f_d), [f_d]) <= 1e-3


@pytest.mark.parametrize("tau", [1.0, 2.0, 10.0])
def test_cwd_tau_bounded(tau):
    g = torch.Generator().manual_seed(3)
    f_c = torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64)
    f_d = torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64, requires_grad=True)
    loss = cwd_loss(f_c, f_d, tau)
    loss.backward()
    assert math.isfinite(loss.item()) and loss.item() < 1e3
    assert torch.isfinite(f_d.grad).all()


def test_cwd_errors():
    with pytest.raises(ValueError):
        cwd_loss(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 3))
    with pytest.raises(ValueError):
        cwd_loss(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 2), tau=0)


def test_mimic_losses():
    f = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    assert mimic_loss(f, f, 1).item() == 0 and mimic_loss(f, f, 2).item() == 0
    assert mimic_loss(f, f - 0.5, 1).item() == pytest.approx(0.5)
    assert mimic_loss(f, f - 0.5, 2).item() == pytest.approx(0.25)
    g = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    a, b = f.reshape(-1).tolist(), g.reshape(-1).tolist()
    naive1 = sum(abs(x - y) for x, y in zip(a, b)) / len(a)
    naive2 = sum((x - y) ** 2 for x, y in zip(a, b)) / len(a)
    assert abs(mimic_loss(f, g, 1).item() - naive1) <= 1e-9
    assert abs(mimic_loss(f, g, 2).item() - naive2) <= 1e-9
    with pytest.raises(ValueError):
        mimic_loss(f, g, 3)


def test_multiscale_weighting():
    shapes = [(1, 2, 8, 8), (1, 2, 4, 4), (1, 2, 2, 2)]
    fc = [torch.randn(s, dtype=torch.float64) for s in shapes]
    assert multiscale_adaption_loss(fc, [f.clone() for f in fc]).item() == 0.0
    fd = [f.clone() for f in fc]
    fd[0] = torch.randn(shapes[0], dtype=torch.float64)
    v = cwd_loss(fc[0], fd[0]).item()
    assert multiscale_adaption_loss(fc, fd).item() == pytest.approx(0.7 * v, rel=1e-12)
    assert AdaptionLossConfig().scale_weights == (0.7, 0.2, 0.1)
    with pytest.raises(ValueError):
        multiscale_adaption_loss(fc[:2], fd[:2])


def test_adaption_config_validation():
    with pytest.raises(ValueError):
        AdaptionLossConfig(scale_weights=(0.5, 0.2, 0.1))
    with pytest.raises(ValueError):
        AdaptionLossConfig(tau=0)
    with pytest.raises(ValueError):
        AdaptionLossConfig(kind="mgd")


# --- attention fusion -------------------------------------------------------


def _pinned(c, r=2):
    m = AttentionFusion(c, r).double()
    for conv in (m.conv_d, m.conv_h):
        torch.nn.init.dirac_(conv.weight)
        torch.nn.init.zeros_(conv.bias)
    return m


def test_af_saturation_limits():
    m = _pinned(3)
    f_d = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    f_h = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    m.t_override = float("inf")
    assert (m(f_d, f_h) - f_d).abs().max().item() <= 1e-6
    m.t_override = float("-inf")
    assert (m(f_d, f_h) - f_h).abs().max().item() <= 1e-6
    m.t_override = 0.0
    torch.testing.assert_close(m(f_d, f_h), 0.5 * f_d + 0.5 * f_h)


def test_af_output_between_branches():
    m = _pinned(4, r=3)
    f_d = torch.randn(1, 4, 7, 5, dtype=torch.float64)
    f_h = torch.randn(1, 4, 7, 5, dtype=torch.float64)
    y = m(f_d, f_h)
    lo, hi = torch.minimum(f_d, f_h), torch.maximum(f_d, f_h)
    assert torch.all(y >= lo - 1e-12) and torch.all(y <= hi + 1e-12)


def test_af_branch_symmetry():
    m = AttentionFusion(3, 2).double()
    f_d = torch.randn(1, 3, 6, 6, dtype=torch.float64)
    f_h = torch.randn(1, 3, 6, 6, dtype=torch.float64)
    att = torch.sigmoid(m.attention_logits(f_d, f_h))
    y = m(f_d, f_h)
    swapped = m.conv_h(f_h) * (1 - att) + m.conv_d(f_d) * att
    torch.testing.assert_close(y, swapped)


@pytest.mark.parametrize("h,w,r", [(1, 1, 4), (5, 7, 2), (8, 8, 4), (3, 9, 5), (2, 2, 1)])
def test_af_shape_preserved(h, w, r):
    m = AttentionFusion(2, r)
    x = torch.randn(1, 2, h, w)
    assert m(x, x.clone()).shape == x.shape


def test_af_gradcheck():
    m = AttentionFusion(3, 2).double()
    f_d = torch.randn(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    f_h = torch.randn(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    assert central_difference_check(lambda: m(f_d, f_h), [f_d, f_h]) <= 1e-3


def test_af_errors():
    m = AttentionFusion(2)
    with pytest.raises(ValueError):
        m(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 4, 5))
    with pytest.raises(ValueError):
        AttentionFusion(2, r=0)
