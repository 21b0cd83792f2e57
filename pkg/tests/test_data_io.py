import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aseg.data import (PGMError, Sample, binarize_mask, decode_pgm, encode_pgm, heatmap_bytes,
                       load_dataset_dir, load_image_pgm, quantize, resize_bilinear, resize_nearest,
                       save_dataset_dir, save_heatmap, save_image_pgm, synth_dataset)
from oracles import bilinear_loops


# -------------------------------------------------------------------- PGM

def test_pgm_bytes_example():
    img = decode_pgm(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64])) / 255.0
    np.testing.assert_allclose(img, [[0, 1], [0.50196, 0.25098]], atol=5e-6)


def test_pgm_header_comments_and_whitespace():
    data = b"P5 # comment\n 3\t1 # w h\n255\n" + bytes([1, 2, 3])
    assert decode_pgm(data).tolist() == [[1, 2, 3]]


def test_pgm_rejects_ascii_variant():
    with pytest.raises(PGMError, match="byte 0"):
        decode_pgm(b"P2\n2 2\n255\n0 1 2 3\n")


def test_pgm_rejects_maxval():
    with pytest.raises(PGMError, match="maxval 65535"):
        decode_pgm(b"P5\n1 1\n65535\n" + bytes(2))


def test_pgm_rejects_truncated_payload_with_offset():
    with pytest.raises(PGMError, match=r"from byte 11"):
        decode_pgm(b"P5\n2 2\n255\n" + bytes(3))


def test_pgm_rejects_truncated_header():
    with pytest.raises(PGMError, match="truncated PGM header"):
        decode_pgm(b"P5\n2 ")
    with pytest.raises(PGMError, match="bad width"):
        decode_pgm(b"P5\nx 2\n255\n")


@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_pgm_encode_decode_round_trip(h, w, seed):
    px = np.random.default_rng(seed).integers(0, 256, (h, w), dtype=np.uint8)
    np.testing.assert_array_equal(decode_pgm(encode_pgm(px)), px)


def test_save_load_synthetic_image(tmp_path):
    img = synth_dataset(1, seed=0, size=(32, 32))[0].image
    save_image_pgm(img, tmp_path / "a.pgm")
    np.testing.assert_array_equal(load_image_pgm(tmp_path / "a.pgm"), quantize(img) / 255.0)


def test_load_errors_name_the_file(tmp_path):
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P6\n1 1\n255\n\0\0\0")
    with pytest.raises(PGMError, match="bad.pgm"):
        load_image_pgm(bad)
    with pytest.raises(OSError, match="missing.pgm"):
        load_image_pgm(tmp_path / "missing.pgm")


# ----------------------------------------------------------------- resize

def test_resize_same_size_identity():
    img = np.random.default_rng(0).random((5, 7))
    np.testing.assert_array_equal(resize_bilinear(img, 5, 7), img)


@pytest.mark.parametrize("size", [(1, 1), (3, 9), (16, 16)])
def test_resize_constant(size):
    np.testing.assert_allclose(resize_bilinear(np.full((4, 6), 0.3), *size), 0.3, atol=1e-15)


def test_resize_hand_example():
    out = resize_bilinear(np.array([[0.0, 1.0], [1.0, 0.0]]), 4, 4)
    # source coordinates at output centers: -0.25 -> 0 (clamped), 0.25, 0.75, 1.25 -> 1
    w = [0.0, 0.25, 0.75, 1.0]
    expect = np.array([[(1 - a) * b + a * (1 - b) for b in w] for a in w])
    np.testing.assert_allclose(out, expect, atol=1e-15)


@pytest.mark.parametrize("seed", range(6))
def test_resize_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    img = rng.random(tuple(rng.integers(1, 9, 2)))
    oh, ow = (int(v) for v in rng.integers(1, 12, 2))
    np.testing.assert_allclose(resize_bilinear(img, oh, ow), bilinear_loops(img, oh, ow), atol=1e-14)


def test_resize_rejects_zero_extent():
    with pytest.raises(ValueError, match="positive"):
        resize_bilinear(np.zeros((2, 2)), 0, 3)
    with pytest.raises(ValueError, match="positive"):
        resize_nearest(np.zeros((2, 2)), 3, 0)


def test_resize_nearest_keeps_binary():
    m = (np.random.default_rng(1).random((7, 5)) > 0.5).astype(float)
    out = resize_nearest(m, 16, 16)
    assert set(np.unique(out)) <= {0.0, 1.0}
    np.testing.assert_array_equal(resize_nearest(m, 7, 5), m)


def test_binarize():
    assert binarize_mask(np.full((2, 2), 0.6)).tolist() == [[1, 1], [1, 1]]
    assert binarize_mask(np.full((2, 2), 0.4)).tolist() == [[0, 0], [0, 0]]
    mixed = np.random.default_rng(2).random((6, 6))
    expect = [[1 if v >= 0.5 else 0 for v in row] for row in mixed]
    assert binarize_mask(mixed).tolist() == expect


# -------------------------------------------------------------- synthetic

def test_synth_deterministic_bitwise():
    a, b = synth_dataset(4, seed=7), synth_dataset(4, seed=7)
    assert all(x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes()
               for x, y in zip(a, b))
    c = synth_dataset(4, seed=8)
    assert a[0].image.tobytes() != c[0].image.tobytes()


@pytest.mark.parametrize("size", [(128, 128), (64, 64), (32, 48)])
def test_synth_properties(size):
    for s in synth_dataset(8, seed=3, size=size):
        assert s.image.shape == s.mask.shape == size
        assert 0 <= s.image.min() and s.image.max() <= 1
        frac = s.mask.mean()
        assert 0.01 <= frac <= 0.35
        rows, cols = np.mgrid[0:size[0], 0:size[1]].astype(float)
        inside = np.zeros(size, bool)
        for e in s.ellipses:
            inside |= e.level(rows, cols) <= 1
        np.testing.assert_array_equal(s.mask.astype(bool), inside)
        # foreground is dark, so intensity separates the classes on average
        assert s.image[s.mask == 1].mean() < s.image[s.mask == 0].mean()


def test_synth_rejects_empty():
    with pytest.raises(ValueError):
        synth_dataset(0)


def test_sample_validation():
    with pytest.raises(ValueError, match="mask"):
        Sample("x", np.zeros((2, 2)), np.full((2, 2), 2, dtype=np.uint8))
    with pytest.raises(ValueError, match="image"):
        Sample("x", np.zeros((2, 3)), np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        Sample("x", np.full((2, 2), 1.5), np.zeros((2, 2), dtype=np.uint8))


# ------------------------------------------------------------ directories

def test_dataset_dir_round_trip(tmp_path):
    samples = synth_dataset(3, seed=4, size=(32, 32))
    save_dataset_dir(samples, tmp_path / "ds")
    loaded = load_dataset_dir(tmp_path / "ds", size=(32, 32))
    assert [s.id for s in loaded] == [s.id for s in samples]
    for a, b in zip(samples, loaded):
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_array_equal(quantize(a.image) / 255.0, b.image)


def test_dataset_dir_resizes(tmp_path):
    save_dataset_dir(synth_dataset(2, seed=5, size=(64, 64)), tmp_path)
    loaded = load_dataset_dir(tmp_path, size=(32, 32))
    assert all(s.image.shape == (32, 32) and set(np.unique(s.mask)) <= {0, 1} for s in loaded)


def test_dataset_dir_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="does not exist"):
        load_dataset_dir(tmp_path / "nope")
    with pytest.raises(FileNotFoundError, match="no image"):
        load_dataset_dir(tmp_path)
    save_image_pgm(np.zeros((4, 4)), tmp_path / "lonely.pgm")
    with pytest.raises(FileNotFoundError, match="lonely_mask.pgm"):
        load_dataset_dir(tmp_path)


# --------------------------------------------------------------- heatmaps

def test_heatmap_constant_is_mid_gray():
    assert (heatmap_bytes(np.full((3, 4), 7.5)) == 128).all()


def test_heatmap_contains_extremes(tmp_path):
    a = np.random.default_rng(6).normal(size=(8, 8))
    hb = heatmap_bytes(a)
    assert hb.min() == 0 and hb.max() == 255
    assert hb[np.unravel_index(a.argmax(), a.shape)] == 255
    save_heatmap(a, tmp_path / "h.pgm")
    assert decode_pgm((tmp_path / "h.pgm").read_bytes()).tolist() == hb.tolist()


def test_heatmap_rejects_bad_input():
    with pytest.raises(ValueError, match="2-D"):
        heatmap_bytes(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError, match="finite"):
        heatmap_bytes(np.array([[np.nan, 1.0]]))
