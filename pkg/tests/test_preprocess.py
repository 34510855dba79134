import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
import hypothesis.extra.numpy as hnp
from PIL import Image

from surds import preprocess as pp
from surds.errors import AllBackground, ShapeMismatch

from oracles import bbox_bruteforce, bilinear_reference, otsu_mask_bruteforce


def test_binarize_all_white_raises():
    with pytest.raises(AllBackground):
        pp.binarize(np.ones((10, 10)))


def test_binarize_single_ink_pixel():
    img = np.ones((10, 10))
    img[3, 4] = 0.0
    mask = pp.binarize(img)
    assert mask.sum() == 1 and mask[3, 4]


def test_binarize_half_split_matches_bruteforce_otsu():
    img = np.full((8, 8), 0.9)
    img[:, :4] = 0.1
    expected = otsu_mask_bruteforce(img)
    assert expected[:, :4].all() and not expected[:, 4:].any()
    np.testing.assert_array_equal(pp.binarize(img), expected)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_binarize_bimodal_agrees_with_bruteforce(seed):
    r = np.random.default_rng(seed)
    img = np.where(r.random((12, 12)) < 0.3, r.uniform(0.0, 0.2), r.uniform(0.8, 1.0))
    np.testing.assert_array_equal(pp.binarize(img), otsu_mask_bruteforce(img))


@pytest.mark.parametrize("points,expected", [
    ([(3, 4)], (3.0, 4.0)),
    ([(0, 0), (2, 2)], (1.0, 1.0)),
])
def test_center_of_mass(points, expected):
    mask = np.zeros((6, 6), bool)
    for p in points:
        mask[p] = True
    assert pp.center_of_mass(mask) == expected


def test_center_of_mass_full_mask():
    assert pp.center_of_mass(np.ones((5, 5), bool)) == (2.0, 2.0)


def test_center_of_mass_empty():
    with pytest.raises(AllBackground):
        pp.center_of_mass(np.zeros((3, 3), bool))


def test_tight_crop_single_pixel():
    img = np.ones((10, 10))
    img[3, 4] = 0.0
    out = pp.tight_crop(img, img < 0.5)
    assert out.shape == (1, 1) and out[0, 0] == 0.0


def test_tight_crop_all_foreground_is_identity():
    img = np.random.default_rng(0).random((7, 9))
    np.testing.assert_array_equal(pp.tight_crop(img, np.ones_like(img, bool)), img)


def test_tight_crop_three_points():
    mask = np.zeros((10, 10), bool)
    for p in [(1, 1), (1, 8), (6, 3)]:
        mask[p] = True
    r0, r1, c0, c1 = bbox_bruteforce(mask)
    assert (r0, r1, c0, c1) == (1, 6, 1, 8)
    img = np.arange(100.0).reshape(10, 10)
    out = pp.tight_crop(img, mask)
    assert out.shape == (6, 8)
    np.testing.assert_array_equal(out, img[1:7, 1:9])


def test_tight_crop_empty_mask():
    with pytest.raises(AllBackground):
        pp.tight_crop(np.ones((4, 4)), np.zeros((4, 4), bool))


masks = hnp.arrays(bool, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=24)).filter(np.any)


@settings(max_examples=200, deadline=None)
@given(masks)
def test_crop_sound_tight_idempotent(mask):
    r0, r1, c0, c1 = pp.crop_bounds(mask)
    assert (r0, r1, c0, c1) == bbox_bruteforce(mask)
    crop = pp.tight_crop(mask, mask)
    # soundness: every ink bit survives the crop
    assert crop.sum() == mask.sum()
    # tightness: each border line touches ink
    assert crop[0].any() and crop[-1].any() and crop[:, 0].any() and crop[:, -1].any()
    np.testing.assert_array_equal(pp.tight_crop(crop, crop), crop)


def test_resize_normalize_gray_fixed_point():
    out = pp.resize_normalize(np.full((256, 256), 0.5))
    assert out.shape == (256, 256, 3)
    assert np.all(out == 0.0)


def test_resize_normalize_white_upsample():
    out = pp.resize_normalize(np.ones((128, 128)))
    assert out.shape == (256, 256, 3)
    np.testing.assert_allclose(out, 1.0, atol=1e-7)


def test_resize_normalize_checkerboard_matches_reference():
    checker = (np.indices((512, 512)).sum(axis=0) % 2).astype(np.float64)
    ref = (bilinear_reference(checker, 256, 256) - 0.5) / 0.5
    out = pp.resize_normalize(checker)
    for ch in range(3):
        np.testing.assert_allclose(out[:, :, ch], ref, atol=1e-6)


def test_resize_normalize_random_upsample_matches_reference():
    img = np.random.default_rng(3).random((23, 37))
    ref = (bilinear_reference(img, 64, 64) - 0.5) / 0.5
    np.testing.assert_allclose(pp.resize_normalize(img, 64)[:, :, 0], ref, atol=1e-6)


def test_resize_channels_identical():
    out = pp.resize_normalize(np.random.default_rng(1).random((40, 90)))
    assert np.array_equal(out[..., 0], out[..., 1]) and np.array_equal(out[..., 0], out[..., 2])


def test_patchify_roundtrip_and_indexing():
    img = np.random.default_rng(0).standard_normal((256, 256, 3)).astype(np.float32)
    patches = pp.patchify(img)
    assert patches.shape == (16, 64, 64, 3)
    assert np.array_equal(pp.unpatchify(patches), img)


def test_patchify_index_mapping():
    img = np.zeros((256, 256, 3), np.float32)
    img[0, 0] = 7.0
    img[200, 130] = 9.0
    patches = pp.patchify(img)
    assert patches[0, 0, 0, 0] == 7.0
    assert patches[4 * 3 + 2, 200 - 192, 130 - 128, 0] == 9.0
    assert np.count_nonzero(patches == 9.0) == 3


def test_patchify_rejects_wrong_shape():
    with pytest.raises(ShapeMismatch):
        pp.patchify(np.zeros((128, 128, 3)))


def test_pipeline_deterministic(tmp_path):
    r = np.random.default_rng(5)
    img = np.ones((60, 140))
    img[10:40, 20:120] = r.random((30, 100)) * 0.3
    a = pp.preprocess(img)
    b = pp.preprocess(img.copy())
    assert a.tobytes() == b.tobytes()
    assert pp.patchify(a).tobytes() == pp.patchify(b).tobytes()


@pytest.mark.parametrize("fmt", ["PNG", "TIFF"])
def test_load_raw_formats(tmp_path, fmt):
    arr = np.full((20, 30), 255, np.uint8)
    arr[5:10, 5:25] = 0
    path = tmp_path / f"x.{fmt.lower()}"
    Image.fromarray(arr).save(path, format=fmt)
    raw = pp.load_raw(path)
    assert raw.shape == (20, 30) and raw.min() == 0.0 and raw.max() == 1.0
    out = pp.preprocess(raw, 32)
    assert out.shape == (32, 32, 3)


def test_preprocess_file_cache(tmp_path):
    arr = np.full((20, 30), 255, np.uint8)
    arr[5:10, 5:25] = 0
    Image.fromarray(arr).save(tmp_path / "a.png")
    out = pp.preprocess_file(tmp_path / "a.png", 32, tmp_path / "cache", "w1/a.png")
    cached = tmp_path / "cache" / "w1" / "a.png.32.npy"
    assert cached.exists()
    assert np.array_equal(np.load(cached), out)
    assert np.array_equal(pp.preprocess_file(tmp_path / "a.png", 32, tmp_path / "cache", "w1/a.png"), out)
