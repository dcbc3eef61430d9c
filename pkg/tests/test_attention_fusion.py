import math

import pytest
import torch
from hypothesis import given, strategies as st

from oracles import param_gradient_error, sigmoid
from udareid.attention_fusion import (
    ECAB,
    ChannelMismatch,
    EnsembleFusion,
    IndivisibleChannels,
    ZeroMeanFeature,
    bmfn,
    ecab,
    ecab_widths,
    ensemble_fuse,
)
from udareid.network import BatchNorm, gap

seeds = st.integers(0, 2**31)


def _identity_ecab(channels=1):
    att = ECAB(channels, hidden_layers=1, rate=1).double()
    with torch.no_grad():
        att.layer1.weight.copy_(torch.eye(channels))
        att.layer1.bias.zero_()
    return att


def test_widths():
    assert ecab_widths(64, 5, 4) == [64, 16, 4, 4, 16, 64]
    assert ecab_widths(64, 3, 4) == [64, 16, 16, 64]
    assert ecab_widths(8, 1, 4) == [8, 8]
    assert len(ECAB(64).layer_names) == 5


def test_width_errors():
    with pytest.raises(ValueError):
        ecab_widths(64, 4, 4)
    with pytest.raises(IndivisibleChannels):
        ecab_widths(24, 5, 4)


def test_zero_input_zero_bias():
    att = ECAB(16, 3, 2)
    for name in att.layer_names:
        torch.nn.init.zeros_(getattr(att, name).bias)
    out = ecab(torch.zeros(2, 16, 4, 4), att)
    assert torch.count_nonzero(out.zeta_max) == torch.count_nonzero(out.zeta_avg) == 0
    torch.testing.assert_close(out.zeta_sigma, torch.full((2, 16), 0.5))
    assert torch.count_nonzero(out.psi) == 0


def test_constant_map_identity_mlp():
    out = ecab(torch.full((1, 1, 3, 2), 0.5, dtype=torch.float64), _identity_ecab())
    assert out.psi.item() == pytest.approx(1.0 * sigmoid(1.0), abs=1e-12)
    assert out.psi.item() == pytest.approx(0.7311, abs=1e-4)


@given(seeds, st.integers(1, 3), st.integers(1, 4), st.integers(1, 4))
def test_psi_bounds(seed, n, h, w):
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    att = ECAB(16, 3, 2).double()
    zeta = torch.rand(n, 16, h, w, generator=g, dtype=torch.float64) * 5
    out = att.attend(zeta)
    assert (out.psi >= 0).all()
    bound = out.zeta_max + out.zeta_avg
    assert ((out.psi < bound) | (bound == 0)).all()


@given(seeds)
def test_spatial_permutation_invariance(seed):
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    att = ECAB(16, 3, 2).double()
    zeta = torch.rand(2, 16, 4, 3, generator=g, dtype=torch.float64)
    perm = torch.randperm(12, generator=g)
    shuffled = zeta.flatten(2)[..., perm].view_as(zeta)
    torch.testing.assert_close(att(zeta), att(shuffled), rtol=0, atol=1e-12)


@given(seeds, st.floats(0.01, 100))
def test_pooled_vectors_scale(seed, s):
    g = torch.Generator().manual_seed(seed)
    att = ECAB(16, 3, 2).double()
    zeta = torch.rand(1, 16, 4, 2, generator=g, dtype=torch.float64)
    a, b = att.attend(zeta), att.attend(zeta * s)
    torch.testing.assert_close(b.zeta_max, a.zeta_max * s, rtol=1e-12, atol=0)
    torch.testing.assert_close(b.zeta_avg, a.zeta_avg * s, rtol=1e-12, atol=0)


def test_attend_accepts_single_map():
    att = ECAB(16, 3, 2)
    zeta = torch.rand(16, 2, 2)
    torch.testing.assert_close(att.attend(zeta).psi, att(zeta[None])[0])
    with pytest.raises(ChannelMismatch):
        att(torch.rand(1, 8, 2, 2))


class _FixedPsi(torch.nn.Module):
    def __init__(self, psi):
        super().__init__()
        self.psi = psi

    def forward(self, zeta):
        return self.psi.expand(zeta.shape[0], -1)


def test_identity_attention_passes_teacher_map():
    tau = torch.rand(3, 4, 6, 2)
    bn = BatchNorm(4).eval()
    out = ensemble_fuse(torch.rand(3, 4, 3, 2), tau, _FixedPsi(torch.ones(1, 4)), bn)
    assert torch.equal(out.fused_map, tau)
    torch.testing.assert_close(out.theta, bn(gap(tau)))


def test_zero_attention():
    out = ensemble_fuse(torch.rand(2, 4, 3, 2), torch.rand(2, 4, 6, 2), _FixedPsi(torch.zeros(1, 4)), BatchNorm(4).eval())
    assert torch.count_nonzero(out.fused_map) == 0


def test_fused_gap_hand_value():
    tau = torch.stack([torch.full((4, 2), 1.0), torch.full((4, 2), 2.0)])[None]
    out = ensemble_fuse(torch.rand(1, 2, 2, 2), tau, _FixedPsi(torch.tensor([[0.5, 0.25]])), BatchNorm(2).eval())
    torch.testing.assert_close(gap(out.fused_map), torch.tensor([[0.5, 0.5]]))


def test_fuse_channel_mismatch():
    with pytest.raises(ChannelMismatch):
        ensemble_fuse(torch.rand(1, 4, 2, 2), torch.rand(1, 8, 4, 2), ECAB(4, 1, 1), BatchNorm(4))


def test_fusion_parameter_names():
    names = set(dict(EnsembleFusion(16, 3, 2).named_parameters()))
    assert {"ecab.top.layer1.weight", "ecab.bottom.layer3.bias", "fusion.top.bn.gamma", "fusion.bottom.bn.beta"} <= names
    f = EnsembleFusion(16, 3, 2)
    assert not torch.equal(f.ecab["top"].layer1.weight, f.ecab["bottom"].layer1.weight)


def test_bmfn_identical_pair():
    v = torch.tensor([3.0, 4.0])
    torch.testing.assert_close(bmfn(v, v), v / 5)


def test_bmfn_hand_value():
    out = bmfn(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]))
    torch.testing.assert_close(out, torch.full((2,), 1 / math.sqrt(2)))
    assert out[0].item() == pytest.approx(0.7071, abs=1e-4)


@given(seeds, st.integers(1, 8), st.integers(1, 32))
def test_bmfn_unit_norm_and_symmetric(seed, n, d):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(n, d, generator=g, dtype=torch.float64)
    b = torch.randn(n, d, generator=g, dtype=torch.float64)
    if ((a + b).norm(dim=1) < 1e-9).any():
        return
    out = bmfn(a, b)
    assert torch.equal(out, bmfn(b, a))
    torch.testing.assert_close(out.norm(dim=1), torch.ones(n, dtype=torch.float64), rtol=0, atol=1e-6)


def test_bmfn_errors():
    with pytest.raises(ZeroMeanFeature):
        bmfn(torch.tensor([1.0, -1.0]), torch.tensor([-1.0, 1.0]))
    with pytest.raises(ValueError):
        bmfn(torch.zeros(2), torch.zeros(3))


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("name", ["ecab.top.layer1.weight", "ecab.top.layer3.bias", "fusion.top.bn.gamma", "fusion.top.bn.beta"])
def test_fusion_parameter_gradients(seed, name):
    torch.manual_seed(seed)
    fusion = EnsembleFusion(8, 3, 2).double().train()
    zeta = torch.rand(3, 8, 2, 2, dtype=torch.float64)
    tau = torch.rand(3, 8, 4, 2, dtype=torch.float64)
    coef = torch.randn(3, 8, dtype=torch.float64)

    def loss():
        return (fusion.branch("top", zeta, tau).theta * coef).sum()

    assert param_gradient_error(fusion, name, loss) < 1e-4
