import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roadssda.augment import AugmentConfig, augment
from roadssda.datasets import TileSample


def tile(h=40, w=40, seed=0):
    rng = np.random.default_rng(seed)
    return TileSample(rng.integers(0, 256, (h, w, 3), dtype=np.uint8), rng.choice(np.array([0, 1, 255], np.uint8), (h, w)))


def test_same_seed_same_output():
    cfg = AugmentConfig(crop_size=32)
    a = augment(tile(), cfg, np.random.default_rng(5))
    b = augment(tile(), cfg, np.random.default_rng(5))
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.mask, b.mask)


def test_output_shape_and_alphabet():
    cfg = AugmentConfig(crop_size=48)
    for s in range(20):
        out = augment(tile(seed=s), cfg, np.random.default_rng(s))
        assert out.image.shape == (48, 48, 3) and out.image.dtype == np.uint8
        assert out.mask.shape == (48, 48)
        assert set(np.unique(out.mask)) <= {0, 1, 255}


def test_identity_config_is_a_crop():
    cfg = AugmentConfig(scale_range=(1, 1), rotations=(0,), hflip_prob=0, vflip_prob=0, color_jitter=(0, 0, 0), crop_size=40)
    t = tile()
    out = augment(t, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(out.image, t.image)
    np.testing.assert_array_equal(out.mask, t.mask)


def test_geometry_keeps_image_and_mask_aligned():
    # encode the label in the image so any misalignment shows up
    rng = np.random.default_rng(1)
    mask = rng.integers(0, 2, (32, 32)).astype(np.uint8)
    image = np.repeat((mask * 200)[..., None], 3, axis=2).astype(np.uint8)
    cfg = AugmentConfig(scale_range=(1, 1), color_jitter=(0, 0, 0), crop_size=24)
    for s in range(20):
        out = augment(TileSample(image, mask), cfg, np.random.default_rng(s))
        np.testing.assert_array_equal(out.image[..., 0] == 200, out.mask == 1)


def test_small_tile_is_padded_with_ignore():
    cfg = AugmentConfig(scale_range=(1, 1), rotations=(0,), hflip_prob=0, vflip_prob=0, color_jitter=(0, 0, 0), crop_size=16)
    t = TileSample(np.full((10, 10, 3), 9, np.uint8), np.ones((10, 10), np.uint8))
    out = augment(t, cfg, np.random.default_rng(0))
    assert (out.mask[:10, :10] == 1).all()
    assert (out.mask[10:] == 255).all() and (out.mask[:, 10:] == 255).all()


def test_color_jitter_leaves_mask_alone():
    cfg = AugmentConfig(scale_range=(1, 1), rotations=(0,), hflip_prob=0, vflip_prob=0, color_jitter=(0.5, 0.5, 0.5), crop_size=40)
    t = tile()
    out = augment(t, cfg, np.random.default_rng(3))
    np.testing.assert_array_equal(out.mask, t.mask)
    assert not np.array_equal(out.image, t.image)


@pytest.mark.parametrize(
    "kw",
    [dict(scale_range=(0, 1)), dict(scale_range=(2, 1)), dict(rotations=(45,)), dict(hflip_prob=2), dict(color_jitter=(-1, 0, 0)), dict(crop_size=0)],
)
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        AugmentConfig(**kw)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 50), st.integers(1, 50), st.integers(1, 40), st.integers(0, 1000))
def test_any_input_size_yields_crop(h, w, crop, seed):
    out = augment(tile(h, w, seed), AugmentConfig(crop_size=crop), np.random.default_rng(seed))
    assert out.image.shape == (crop, crop, 3) and out.mask.shape == (crop, crop)
