import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from udareid.preprocess import (
    AugmentationPolicy,
    BadShape,
    augment,
    denormalize,
    grayscale_patch,
    hflip,
    normalize,
    resize,
)

images = arrays(np.float32, st.tuples(st.integers(1, 12), st.integers(1, 12), st.just(3)),
                elements=st.floats(0, 1, width=32))


def _img(seed=0, shape=(64, 32, 3)):
    return np.random.default_rng(seed).random(shape, dtype=np.float32)


def test_normalize_mean_maps_to_zero():
    px = np.array([[[0.485, 0.456, 0.406]]], dtype=np.float64)
    np.testing.assert_allclose(normalize(px, AugmentationPolicy()), 0.0, atol=1e-6)


def test_normalize_white_pixel():
    out = normalize(np.ones((1, 1, 3)), AugmentationPolicy())[0, 0]
    np.testing.assert_allclose(out, [2.2489, 2.4286, 2.6400], atol=1e-4)


def test_identity_normalization():
    img = _img()
    pol = AugmentationPolicy(mean=(0, 0, 0), std=(1, 1, 1))
    np.testing.assert_array_equal(normalize(img, pol), img)


@given(images)
def test_normalize_roundtrip(img):
    pol = AugmentationPolicy()
    back = denormalize(normalize(img.astype(np.float64), pol), pol)
    assert np.max(np.abs(back - img)) < 1e-6


@given(images)
def test_flip_involution(img):
    np.testing.assert_array_equal(hflip(hflip(img)), img)


def test_eval_stage_is_plain_resize():
    img = _img(1, (80, 40, 3))
    pol = AugmentationPolicy.toy("eval")
    a, b = augment(img, pol), augment(img, pol)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, resize(img, (64, 32)))
    assert a.shape == (64, 32, 3)


def test_degenerate_policy_equals_resize():
    img = _img(2, (70, 30, 3))
    pol = AugmentationPolicy.toy("finetune", pad=0, flip_prob=0, color_dropout_prob=0, erase_prob=0)
    out = augment(img, pol, np.random.default_rng(5))
    np.testing.assert_array_equal(out, resize(img, (64, 32)))


def test_seeded_augmentation_reproduces(toy_domains):
    source, _ = toy_domains
    pol = AugmentationPolicy.toy("finetune")
    runs = []
    for _ in range(2):
        rng = np.random.default_rng(42)
        runs.append(np.stack([augment(r, pol, rng) for r in source[:20]]))
    np.testing.assert_array_equal(runs[0], runs[1])


def test_output_shape_and_range():
    pol = AugmentationPolicy.toy("finetune", erase_prob=1.0, color_dropout_prob=1.0)
    rng = np.random.default_rng(0)
    for s in range(10):
        out = augment(_img(s, (50, 20, 3)), pol, rng)
        assert out.shape == (64, 32, 3)
        assert out.min() >= 0 and out.max() <= 1


def test_grayscale_patch_property():
    img = _img(3)
    out = grayscale_patch(img, np.random.default_rng(9), AugmentationPolicy.toy())
    changed = np.any(out != img, axis=-1)
    assert changed.any()
    # inside the patch R=G=B; outside untouched
    inside = out[changed]
    np.testing.assert_allclose(inside[:, 0], inside[:, 1], atol=1e-6)
    np.testing.assert_allclose(inside[:, 1], inside[:, 2], atol=1e-6)
    np.testing.assert_array_equal(out[~changed], img[~changed])


def test_bad_shape():
    with pytest.raises(BadShape):
        augment(np.zeros((4, 4, 1)), AugmentationPolicy.toy("eval"))
    with pytest.raises(BadShape):
        augment(np.zeros((4, 4)), AugmentationPolicy.toy("eval"))


def test_stochastic_stage_needs_rng():
    with pytest.raises(ValueError):
        augment(_img(), AugmentationPolicy.toy("pretrain"))


def test_policy_validation():
    with pytest.raises(ValueError):
        AugmentationPolicy(flip_prob=1.5)
    with pytest.raises(ValueError):
        AugmentationPolicy(std=(0.2, 0.0, 0.2))
    with pytest.raises(ValueError):
        AugmentationPolicy(stage="test")


def test_default_policy():
    pol = AugmentationPolicy()
    assert pol.target_size == (256, 128)
    assert (pol.pad, pol.flip_prob, pol.color_dropout_prob, pol.erase_prob) == (10, 0.5, 0.4, 0.5)
    assert pol.mean == (0.485, 0.456, 0.406)
    assert pol.std == (0.229, 0.224, 0.225)
