from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dacbio.augment import (
    AugmentConfig,
    AugmentPipeline,
    GeometricDraw,
    PhotometricDraw,
    apply_geometric,
    apply_photometric,
    draw_geometric,
    strong_augment,
    weak_augment,
)
from dacbio.biometry import gaussian_target
from dacbio.phantom import Sample

SHAPE = (96, 128)
NO_GEOMETRY = AugmentConfig(flip_p=0.0, affine_p=0.0, grid_p=0.0)
PHOTO_OFF = dict(gamma_p=0.0, bc_p=0.0, compression_p=0.0, speckle_p=0.0)


def _sample(rng, shape=SHAPE, kps=((40.0, 30.0), (70.0, 60.0))):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    mask = (((xx - w / 2) / (w / 3)) ** 2 + ((yy - h / 2) / (h / 3)) ** 2 <= 1).astype(np.float32)
    kp = np.array(kps, dtype=np.float64)
    labels = np.concatenate([mask[None], gaussian_target(kp, 2.0, shape)])
    return Sample(image=rng.random(shape).astype(np.float32), spacing=(0.2, 0.25), domain="HE",
                  labels=labels, keypoints=kp)


def test_double_flip_is_identity(rng):
    s = _sample(rng)
    flip = GeometricDraw(flip=True)
    back = apply_geometric(apply_geometric(s, flip), flip)
    assert np.array_equal(back.image, s.image)
    assert np.array_equal(back.labels, s.labels)
    assert back.keypoints == pytest.approx(s.keypoints)


def test_identity_draw_leaves_sample(rng):
    s = _sample(rng)
    out = weak_augment(s, np.random.default_rng(1), NO_GEOMETRY)
    assert np.array_equal(out.image, s.image) and np.array_equal(out.labels, s.labels)
    assert out.spacing == s.spacing


def test_flip_keypoint_full_width():
    s = Sample(image=np.zeros((448, 576), np.float32), spacing=(0.2, 0.2), domain="HE",
               keypoints=np.array([[100.0, 200.0], [10.0, 10.0]]))
    out = apply_geometric(s, GeometricDraw(flip=True))
    assert tuple(out.keypoints[0]) == (475.0, 200.0)


def test_photometric_identities_equal_weak(rng):
    s = _sample(rng)
    cfg = AugmentConfig(**PHOTO_OFF)
    weak = weak_augment(s, np.random.default_rng(4), cfg)
    strong = strong_augment(s, np.random.default_rng(4), cfg)
    assert np.array_equal(weak.image, strong.image)
    assert np.array_equal(weak.labels, strong.labels)


def test_zero_speckle_on_constant_image():
    img = np.full(SHAPE, 0.5, np.float32)
    assert np.array_equal(apply_photometric(img, PhotometricDraw(speckle_var=0.0)), img)


def test_gamma_power_law():
    out = apply_photometric(np.full((4, 4), 0.5, np.float32), PhotometricDraw(gamma=2.0))
    assert out == pytest.approx(0.25)


def test_contrast_brightness_and_compression(rng):
    img = rng.random(SHAPE).astype(np.float32) * 0.5 + 0.25
    shifted = apply_photometric(img, PhotometricDraw(brightness=0.1))
    assert shifted == pytest.approx(img + 0.1, abs=1e-6)
    stretched = apply_photometric(img, PhotometricDraw(contrast=1.2))
    assert stretched.std() == pytest.approx(img.std() * 1.2, rel=1e-3)
    jpeg = apply_photometric(img, PhotometricDraw(quality=30))
    assert not np.array_equal(jpeg, img) and np.abs(jpeg - img).mean() < 0.1


@pytest.mark.parametrize("seed", range(6))
def test_strong_labels_match_weak_labels(rng, seed):
    s = _sample(rng)
    weak = weak_augment(s, np.random.default_rng(seed))
    strong = strong_augment(s, np.random.default_rng(seed))
    assert np.array_equal(weak.labels, strong.labels)
    assert np.array_equal(weak.keypoints, strong.keypoints)
    assert weak.spacing == strong.spacing


def test_scale_updates_spacing(rng):
    s = _sample(rng)
    d = GeometricDraw(matrix=1.1 * np.eye(2), offset=np.zeros(2), scale=1.1)
    assert apply_geometric(s, d).spacing == pytest.approx((0.22, 0.275))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), strong=st.booleans(),
       x=st.integers(30, 98), y=st.integers(25, 71))
def test_delta_peak_follows_keypoint(seed, strong, x, y):
    s = Sample(image=np.zeros(SHAPE, np.float32), spacing=(0.2, 0.2), domain="HE",
               labels=np.zeros((3, *SHAPE), np.float32), keypoints=np.array([[x, y], [x, y]], float))
    s.labels[1, y, x] = 1.0
    fn = strong_augment if strong else weak_augment
    out = fn(s, np.random.default_rng(seed))
    kx, ky = out.keypoints[0]
    # interpolation spreads a delta over its neighbours; the argmax is the nearest pixel
    py, px = np.unravel_index(out.labels[1].argmax(), SHAPE)
    if out.labels[1].max() > 0:
        assert abs(px - kx) <= 1.0 and abs(py - ky) <= 1.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_outputs_stay_in_unit_range(seed):
    s = _sample(np.random.default_rng(seed))
    s = replace(s, image=np.clip(s.image * 1.5 - 0.2, 0, 1).astype(np.float32))
    out = strong_augment(s, np.random.default_rng(seed))
    for a in (out.image, out.labels):
        assert a.min() >= 0.0 and a.max() <= 1.0
    assert set(np.unique(out.labels[0])) <= {0.0, 1.0}


def test_draws_are_seeded():
    a = draw_geometric(np.random.default_rng(3), AugmentConfig(flip_p=1, affine_p=1, grid_p=1), SHAPE)
    b = draw_geometric(np.random.default_rng(3), AugmentConfig(flip_p=1, affine_p=1, grid_p=1), SHAPE)
    assert a.flip and np.array_equal(a.matrix, b.matrix) and np.array_equal(a.grid, b.grid)


def test_pipeline_modes(rng):
    s = _sample(rng)
    assert AugmentPipeline("none")(s, rng) is s
    with pytest.raises(ValueError):
        AugmentPipeline("medium")
    cfg = AugmentConfig.from_dict(AugmentConfig().to_dict())
    assert cfg == AugmentConfig()
