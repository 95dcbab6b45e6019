import numpy as np
import pytest

from mimlab.imaging import (
    DatasetManifest,
    Image,
    PPMError,
    augment,
    center_view,
    decode_ppm,
    encode_ppm,
    load_ppm,
    resize_bilinear,
    sample_crop,
    synth_corpus,
    write_ppm,
)
from mimlab.patches import patchify, unpatchify


def ppm_bytes(w, h, pixels, maxval=255):
    return b"P6\n%d %d\n%d\n" % (w, h, maxval) + bytes(pixels)


# -- PPM ------------------------------------------------------------------------

def test_single_red_pixel():
    img = decode_ppm(ppm_bytes(1, 1, [255, 0, 0]))
    np.testing.assert_array_equal(img.rgb[:, 0, 0], [1.0, 0.0, 0.0])


def test_pixel_values_map_to_p_over_255():
    vals = list(range(0, 256, 17))[:12]
    img = decode_ppm(ppm_bytes(2, 2, vals))
    expected = np.array(vals, dtype=np.float64).reshape(2, 2, 3).transpose(2, 0, 1) / 255.0
    np.testing.assert_array_equal(img.rgb, expected.astype(np.float32))


def test_maxval_other_than_255_rejected():
    with pytest.raises(PPMError, match="maxval"):
        decode_ppm(ppm_bytes(1, 1, [1, 2, 3], maxval=65535))


def test_bad_magic_reports_offset_zero():
    with pytest.raises(PPMError) as e:
        decode_ppm(b"P3\n1 1\n255\n" + bytes(3))
    assert e.value.offset == 0


def test_truncated_data_reports_offset():
    buf = ppm_bytes(2, 2, [0] * 12)[:-5]
    with pytest.raises(PPMError, match="truncated") as e:
        decode_ppm(buf)
    assert e.value.offset == len(buf)


def test_header_comments_are_skipped():
    img = decode_ppm(b"P6\n# made by hand\n1 1\n255\n" + bytes([0, 255, 0]))
    np.testing.assert_array_equal(img.rgb[:, 0, 0], [0, 1, 0])


def test_roundtrip_is_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    data = ppm_bytes(5, 3, rng.integers(0, 256, size=45).tolist())
    src = tmp_path / "a.ppm"
    src.write_bytes(data)
    out = tmp_path / "b.ppm"
    write_ppm(out, load_ppm(src))
    assert out.read_bytes() == data
    assert encode_ppm(decode_ppm(data)) == data


def test_image_rejects_out_of_range():
    with pytest.raises(ValueError):
        Image(np.full((3, 2, 2), 1.5))


# -- corpus -------------------------------------------------------------------------

def test_corpus_is_deterministic_and_balanced():
    m1, a = synth_corpus(3, 16, 32, 4)
    m2, b = synth_corpus(3, 16, 32, 4)
    assert m1 == m2
    assert all(np.array_equal(x.rgb, y.rgb) for x, y in zip(a, b))
    assert np.bincount([lab for _, lab in m1.entries]).tolist() == [4, 4, 4, 4]


def test_full_size_corpus_has_128_per_class():
    m, _ = synth_corpus(0, 512, 8, 4)
    assert np.bincount([lab for _, lab in m.entries]).tolist() == [128] * 4


def test_distinct_seeds_differ():
    _, a = synth_corpus(0, 4, 16, 4)
    _, b = synth_corpus(1, 4, 16, 4)
    assert any(not np.array_equal(x.rgb, y.rgb) for x, y in zip(a, b))


def test_corpus_values_in_unit_range_and_stats_match():
    m, imgs = synth_corpus(0, 8, 16, 4)
    stack = np.stack([im.rgb for im in imgs]).astype(np.float64)
    assert stack.min() >= 0 and stack.max() <= 1
    np.testing.assert_allclose(m.mean, stack.mean(axis=(0, 2, 3)), rtol=1e-12)


def test_corpus_preconditions():
    with pytest.raises(ValueError):
        synth_corpus(0, 3, 16, 4)
    with pytest.raises(ValueError):
        synth_corpus(0, 8, 12, 4)


def test_manifest_roundtrip_and_dense_labels(tmp_path):
    m, _ = synth_corpus(0, 8, 16, 4)
    path = tmp_path / "m.txt"
    m.save(path)
    back = DatasetManifest.read(path)
    assert back == m
    assert back.load(2).rgb.shape == (3, 16, 16)
    with pytest.raises(ValueError, match="dense"):
        DatasetManifest([("a", 0), ("b", 2)])


def test_manifest_with_ppm_entries(tmp_path):
    write_ppm(tmp_path / "x.ppm", np.zeros((3, 4, 4)))
    m = DatasetManifest([("x.ppm", 0)])
    assert m.load(0, tmp_path).rgb.sum() == 0


# -- augmentation ------------------------------------------------------------------

def test_augment_is_deterministic_given_rng():
    _, imgs = synth_corpus(0, 1, 64, 1)
    a = augment(imgs[0], np.random.default_rng(5), 48)
    b = augment(imgs[0], np.random.default_rng(5), 48)
    assert np.array_equal(a.normalized, b.normalized) and a.flipped == b.flipped
    assert a.normalized.shape == (3, 48, 48) and a.crop.rgb.shape == (3, 48, 48)


def test_constant_image_normalizes_to_constant():
    c = np.array([0.2, 0.5, 0.9])
    img = Image(np.broadcast_to(c[:, None, None], (3, 32, 32)))
    mean, std = (0.1, 0.2, 0.3), (0.5, 0.25, 2.0)
    v = augment(img, np.random.default_rng(0), 16, mean, std)
    expected = (c - np.array(mean)) / np.array(std)
    np.testing.assert_allclose(v.normalized, np.broadcast_to(expected[:, None, None], (3, 16, 16)), atol=1e-6)
    np.testing.assert_allclose(v.crop.rgb[:, 0, 0], c, atol=1e-6)


def test_flip_frequency_monte_carlo():
    img = Image(np.random.default_rng(0).random((3, 8, 8)))
    rng = np.random.default_rng(1)
    flips = [augment(img, rng, 8).flipped for _ in range(10_000)]
    assert abs(np.mean(flips) - 0.5) < 0.02


def test_crop_area_fraction_statistics():
    rng = np.random.default_rng(2)
    h = w = 192
    areas, aspects = [], []
    for _ in range(10_000):
        top, left, ch, cw = sample_crop(h, w, rng)
        assert 0 <= top and top + ch <= h and 0 <= left and left + cw <= w
        areas.append(ch * cw / (h * w))
        aspects.append(cw / ch)
    assert 0.82 <= np.mean(areas) <= 0.85
    assert min(areas) >= 0.66 and max(areas) <= 1.0
    assert min(aspects) >= 0.74 and max(aspects) <= 1.36


def test_resize_identity_and_values_stay_in_range():
    x = np.random.default_rng(0).random((3, 10, 10))
    np.testing.assert_allclose(resize_bilinear(x, 10, 10), x, atol=1e-12)
    y = resize_bilinear(x, 7, 13)
    assert y.shape == (3, 7, 13) and y.min() >= 0 and y.max() <= 1


def test_resize_half_pixel_centers():
    # 2 -> 4 upsampling: outputs sit at source coordinates -0.25, 0.25, 0.75, 1.25
    x = np.array([0.0, 1.0])[None, None, :].repeat(3, 0).repeat(1, 1)
    y = resize_bilinear(x, 1, 4)[0, 0]
    np.testing.assert_allclose(y, [0.0, 0.25, 0.75, 1.0])


def test_center_view_is_identity_at_native_size():
    _, imgs = synth_corpus(0, 1, 32, 1)
    v = center_view(imgs[0], 32)
    assert np.array_equal(v.crop.rgb, imgs[0].rgb)


# -- patches -----------------------------------------------------------------------

def test_patchify_shapes():
    assert patchify(np.zeros((3, 192, 192)), 32).shape == (36, 3072)
    assert patchify(np.zeros((3, 64, 64)), 8).shape == (64, 192)


def test_patchify_layout_row_major_channel_major():
    x = np.arange(3 * 4 * 4, dtype=np.float64).reshape(3, 4, 4)
    t = patchify(x, 2)
    # token 1 is the top-right patch; its first entries are channel 0 rows 0..1, cols 2..3
    np.testing.assert_array_equal(t[1, :4], [x[0, 0, 2], x[0, 0, 3], x[0, 1, 2], x[0, 1, 3]])
    np.testing.assert_array_equal(t[1, 4:8], x[1, 0:2, 2:4].reshape(-1))


def test_unpatchify_roundtrip_bit_exact():
    x = np.random.default_rng(0).random((2, 3, 16, 16))
    assert np.array_equal(unpatchify(patchify(x, 4), 4), x)


def test_patchify_rejects_indivisible():
    with pytest.raises(ValueError):
        patchify(np.zeros((3, 10, 10)), 4)
