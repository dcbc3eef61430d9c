import pytest
import torch
from hypothesis import given, strategies as st

from oracles import param_gradient_error
from udareid.network import (
    NonFiniteActivation,
    OddHeight,
    ReIDNet,
    ShapeMismatch,
    forward_features,
    gap,
    split_top_bottom,
)


def test_toy_feature_map_shape():
    net = ReIDNet(10)
    out = forward_features(net, torch.rand(2, 3, 64, 32), "eval")
    assert out.feature_map.shape == (2, 64, 8, 4)
    assert out.pooled.shape == out.neck.shape == (2, 64)
    assert out.logits.shape == (2, 10)
    assert (out.feature_map >= 0).all()


def test_zero_input_with_zeroed_last_block():
    net = ReIDNet()
    with torch.no_grad():
        net.backbone.block4.conv.weight.zero_()
        net.backbone.block4.bn.beta.zero_()
    out = forward_features(net, torch.zeros(1, 3, 64, 32), "eval")
    assert torch.count_nonzero(out.feature_map) == 0
    assert torch.count_nonzero(out.pooled) == 0


def test_eval_mode_is_deterministic():
    net = ReIDNet(5)
    x = torch.rand(3, 3, 64, 32)
    a = forward_features(net, x, "eval")
    b = forward_features(net, x, "eval")
    assert torch.equal(a.feature_map, b.feature_map) and torch.equal(a.logits, b.logits)


def test_pooled_is_spatial_mean():
    net = ReIDNet()
    out = forward_features(net, torch.rand(2, 3, 64, 32), "eval")
    torch.testing.assert_close(out.pooled, out.feature_map.mean(dim=(2, 3)))


def test_shape_errors():
    net = ReIDNet()
    with pytest.raises(ShapeMismatch):
        forward_features(net, torch.rand(1, 3, 32, 32))
    with pytest.raises(ShapeMismatch):
        forward_features(net, torch.rand(3, 64, 32))
    with pytest.raises(ValueError):
        forward_features(net, torch.rand(1, 3, 64, 32), "test")


def test_odd_height_rejected():
    net = ReIDNet(input_size=(72, 32))  # 72 / 8 = 9 rows
    with pytest.raises(OddHeight):
        forward_features(net, torch.rand(1, 3, 72, 32), "eval")
    with pytest.raises(OddHeight):
        split_top_bottom(torch.zeros(1, 2, 3, 4))


def test_non_finite_activation_names_layer():
    net = ReIDNet()
    with torch.no_grad():
        net.backbone.block2.conv.weight[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteActivation) as exc:
        forward_features(net, torch.rand(1, 3, 64, 32), "eval")
    assert exc.value.layer == "backbone.block2"


def test_parameter_names():
    names = set(dict(ReIDNet(3).named_parameters()))
    assert {"backbone.block1.conv.weight", "neck.bn.gamma", "classifier.weight"} <= names
    assert "neck.bn.beta" not in names and "classifier.bias" not in names


def test_split_of_rows():
    fmap = torch.arange(8.0)[None, None, :, None].expand(1, 2, 8, 4)
    top, bottom = split_top_bottom(fmap)
    assert set(top.unique().tolist()) == {0, 1, 2, 3}
    assert set(bottom.unique().tolist()) == {4, 5, 6, 7}
    assert torch.equal(torch.cat([top, bottom], dim=2), fmap)


def test_split_minimal_height():
    fmap = torch.tensor([[1.0, 1.0], [2.0, 2.0]])[None, None]
    top, bottom = split_top_bottom(fmap)
    assert top.flatten().tolist() == [1, 1] and bottom.flatten().tolist() == [2, 2]


@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31))
def test_global_pool_is_mean_of_halves(n, c, half, w, seed):
    g = torch.Generator().manual_seed(seed)
    fmap = torch.rand(n, c, 2 * half, w, generator=g, dtype=torch.float64)
    top, bottom = split_top_bottom(fmap)
    torch.testing.assert_close(gap(fmap), (gap(top) + gap(bottom)) / 2, rtol=0, atol=1e-12)


@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31))
def test_flip_keeps_rows_in_their_half(half, w, seed):
    g = torch.Generator().manual_seed(seed)
    fmap = torch.rand(1, 3, 2 * half, w, generator=g)
    top, bottom = split_top_bottom(fmap.flip(-1))
    t0, b0 = split_top_bottom(fmap)
    assert torch.equal(top, t0.flip(-1)) and torch.equal(bottom, b0.flip(-1))


@pytest.mark.parametrize("seed", range(3))
def test_classifier_gradient_matches_finite_differences(seed):
    torch.manual_seed(seed)
    net = ReIDNet(4, input_size=(16, 8)).double().eval()
    x = torch.rand(2, 3, 16, 8, dtype=torch.float64)
    coef = torch.randn(2, 4, dtype=torch.float64)

    def loss():
        return (forward_features(net, x).logits * coef).sum()

    assert param_gradient_error(net, "classifier.weight", loss) < 1e-4
