import json
import math

import numpy as np
import pytest
from skimage.draw import ellipse as draw_ellipse

from dacbio.phantom import (
    H,
    W,
    DatasetConfig,
    DatasetManifest,
    PhantomConfigError,
    PhantomRanges,
    PhantomSpec,
    _split_plan,
    analytic_biometry,
    generate_dataset,
    generate_phantom,
    resize_sample,
    sample_spec,
    skull_mask,
)

from conftest import quad_perimeter


def _spec(**kw):
    base = dict(skull_center=(288.0, 224.0), skull_axes=(100.0, 50.0), skull_rotation=0.0,
                cerebellum_center=(320.0, 224.0), cerebellum_half_length=20.0, cerebellum_lobe_radius=8.0,
                cerebellum_rotation=math.pi / 2, tissue_texture_seed=0, pixel_spacing=(0.2, 0.2))
    base.update(kw)
    return PhantomSpec(**base)


def _grad_mag(img):
    gy, gx = np.gradient(img.astype(np.float64))
    return float(np.hypot(gx, gy).mean())


def test_same_seed_is_bit_identical():
    a, b = generate_phantom(7, "HE"), generate_phantom(7, "HE")
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.labels, b.labels)


def test_domains_share_geometry_not_pixels():
    he, lc = generate_phantom(7, "HE"), generate_phantom(7, "LC")
    assert he.gt_biometry == lc.gt_biometry
    assert np.array_equal(he.labels, lc.labels)
    assert not np.allclose(he.image, lc.image)
    assert he.image.dtype == np.float32 and he.image.shape == (H, W)
    assert 0.0 <= lc.image.min() and lc.image.max() <= 1.0


def test_hc_of_known_ellipse():
    hc, tcd = analytic_biometry(_spec())
    assert quad_perimeter(100.0, 50.0) * 0.2 == pytest.approx(96.88448, abs=1e-5)
    assert hc == pytest.approx(96.88448, abs=1e-5)
    assert tcd == pytest.approx(40 * 0.2, abs=1e-12)


def test_hc_rotation_invariant_under_isotropic_spacing():
    ref = analytic_biometry(_spec())[0]
    for rot in (0.2, -0.7, 1.3):
        assert analytic_biometry(_spec(skull_rotation=rot))[0] == pytest.approx(ref, rel=1e-9)


@pytest.mark.parametrize("seed", range(12))
def test_keypoints_consistent_with_tcd(seed):
    s = generate_phantom(seed, "HE")
    uep, lep = s.keypoints
    sx, sy = s.spacing
    assert s.gt_biometry[1] == pytest.approx(math.hypot((lep[0] - uep[0]) * sx, (lep[1] - uep[1]) * sy), abs=1e-9)
    assert uep[1] <= lep[1]
    # heatmap peaks sit on the stored keypoints
    for ch, kp in zip(s.labels[1:], s.keypoints):
        y, x = np.unravel_index(ch.argmax(), ch.shape)
        assert (x, y) == tuple(np.round(kp).astype(int))


def test_lc_is_blurrier_than_he_over_fifty_phantoms():
    he = [_grad_mag(generate_phantom(s, "HE").image) for s in range(50)]
    lc = [_grad_mag(generate_phantom(s, "LC").image) for s in range(50)]
    assert np.mean(lc) < np.mean(he)


@pytest.mark.parametrize("seed", range(8))
def test_mask_matches_rasterised_ellipse(seed):
    spec = sample_spec(np.random.default_rng(seed), PhantomRanges())
    ours = skull_mask(spec).astype(bool)
    ref = np.zeros((H, W), bool)
    (cx, cy), (a, b) = spec.skull_center, spec.skull_axes
    rr, cc = draw_ellipse(cy, cx, b, a, shape=(H, W), rotation=-spec.skull_rotation)
    ref[rr, cc] = True
    iou = (ours & ref).sum() / (ours | ref).sum()
    assert iou >= 0.99


@pytest.mark.parametrize("kw", [
    dict(skull_axes=(50.0, 100.0)),
    dict(skull_axes=(100.0, 0.0)),
    dict(cerebellum_center=(380.0, 224.0)),  # pokes through the skull
    dict(cerebellum_lobe_radius=30.0),
    dict(pixel_spacing=(0.0, 0.2)),
    dict(skull_center=(60.0, 224.0)),
])
def test_invalid_geometry_rejected(kw):
    with pytest.raises(PhantomConfigError):
        _spec(**kw)


@pytest.mark.parametrize("kw", [
    dict(skull_major=(-5.0, 100.0)),
    dict(axis_ratio=(0.8, 1.2)),
    dict(cerebellum_offset=(0.6, 0.8)),
    dict(skull_major=(150.0, 280.0)),
])
def test_invalid_ranges_rejected(kw):
    with pytest.raises(PhantomConfigError):
        PhantomRanges(**kw).validate()
    with pytest.raises(PhantomConfigError):
        generate_phantom(0, "HE", PhantomRanges(**kw))


def test_unknown_domain_rejected():
    with pytest.raises(ValueError):
        generate_phantom(0, "XX")


def test_full_size_plan_has_1100_disjoint_entries():
    plan = list(_split_plan(DatasetConfig()))
    assert len(plan) == 1100
    ids = [f"{s}_{i:05d}" for s, i, _ in plan]
    assert len(set(ids)) == 1100
    by_split = {}
    for s, i, _ in plan:
        by_split.setdefault(s, set()).add(i)
    assert {k: len(v) for k, v in by_split.items()} == {"he_train": 500, "lc_train": 400, "lc_test": 200}


@pytest.mark.parametrize("counts", [dict(lc_test=0), dict(he_train=0), dict(lc_train=-1), dict(he_test=-1)])
def test_bad_counts_rejected(counts, tmp_path):
    with pytest.raises(PhantomConfigError):
        generate_dataset(DatasetConfig(**counts), tmp_path)


def test_dataset_layout_and_determinism(small_dataset, tmp_path):
    m = small_dataset
    assert len(m) == 8 + 6 + 4 + 2
    all_ids = [i for ids in m.splits.values() for i in ids]
    assert len(set(all_ids)) == len(all_ids)
    again = generate_dataset(DatasetConfig(he_train=8, lc_train=6, lc_test=4, he_test=2, seed=3), tmp_path)
    assert again.checksums == m.checksums
    reloaded = DatasetManifest.load(m.root)
    assert reloaded.splits == m.splits and reloaded.checksums == m.checksums
    assert json.loads((m.root / "manifest.json").read_text())["seed"] == 3


def test_seed_changes_dataset(small_dataset, tmp_path):
    other = generate_dataset(DatasetConfig(he_train=8, lc_train=6, lc_test=4, he_test=2, seed=4), tmp_path)
    assert other.checksums != small_dataset.checksums


def test_loaded_samples(small_dataset):
    lc_train = small_dataset.load_split("lc_train")
    assert all(s.labels is None and s.gt_biometry is None for s in lc_train)
    test = small_dataset.load_split("lc_test")
    for s in test:
        assert s.domain == "LC" and s.labels.shape == (3, H, W)
        assert s.gt_biometry == pytest.approx(analytic_biometry(s.spec), rel=1e-12)
    # 16-bit storage keeps images within one quantisation step
    fresh = generate_phantom(0, "HE")
    assert fresh.image.dtype == np.float32
    with pytest.raises(KeyError):
        next(small_dataset.iter_split("nope"))


def test_resize_updates_spacing_and_keypoints():
    s = generate_phantom(5, "HE")
    r = resize_sample(s, (128, 160), sigma=2.0)
    fx, fy = 160 / W, 128 / H
    assert r.spacing == pytest.approx((s.spacing[0] / fx, s.spacing[1] / fy))
    assert r.keypoints == pytest.approx((s.keypoints + 0.5) * [fx, fy] - 0.5)
    assert r.labels.shape == (3, 128, 160)
    # physical TCD is unchanged by resampling
    (ux, uy), (lx, ly) = r.keypoints
    tcd = math.hypot((lx - ux) * r.spacing[0], (ly - uy) * r.spacing[1])
    assert tcd == pytest.approx(s.gt_biometry[1], rel=1e-9)
    assert resize_sample(s, (H, W)) is s
