import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lpdesc.geometry import GridSpec, Keypoint, cartesian_grid
from lpdesc.imagecore import (DecodeError, Image, bilinear_sample, decode_image, encode_image,
                              extract_patch, mirror_pad, read_image, sample, write_image)


def test_pgm_decode_scales_bytes():
    buf = b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64])
    img = decode_image(buf, "pgm8")
    np.testing.assert_array_equal(img.data, np.array([[0, 1.0], [128 / 255, 64 / 255]], np.float32))


def test_pgm_header_comments():
    buf = b"P5 # made by hand\n2 1\n# max\n255\n" + bytes([10, 20])
    assert decode_image(buf, "pgm8").data.shape == (1, 2)


def test_pgm_truncated_payload():
    buf = b"P5\n4 4\n255\n" + bytes(15)
    with pytest.raises(DecodeError) as err:
        decode_image(buf, "pgm8")
    assert err.value.offset == len(buf)


@pytest.mark.parametrize("buf", [b"P2\n1 1\n255\n0", b"P5\n1 x\n255\n\0", b"P5\n1 1\n65535\n\0\0", b"P5\n1"])
def test_pgm_malformed_header(buf):
    with pytest.raises(DecodeError):
        decode_image(buf, "pgm8")


def test_rawf32_passthrough():
    buf = b"LPIM" + struct.pack("<III", 1, 3, 0) + np.array([0.5, 0.25, 1.0], "<f4").tobytes()
    np.testing.assert_array_equal(decode_image(buf, "rawf32").data, [[0.5, 0.25, 1.0]])


def test_rawf32_errors():
    good = b"LPIM" + struct.pack("<III", 1, 2, 0) + np.array([0.5, np.nan], "<f4").tobytes()
    with pytest.raises(DecodeError) as err:
        decode_image(good, "rawf32")
    assert err.value.offset == 20
    with pytest.raises(DecodeError):
        decode_image(good[:-1], "rawf32")
    with pytest.raises(DecodeError):
        decode_image(b"LPIM\0\0", "rawf32")
    with pytest.raises(DecodeError):
        decode_image(b"XXXX" + good[4:], "rawf32")


def test_codec_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = Image(rng.random((5, 7)).astype(np.float32))
    write_image(tmp_path / "x.raw", img, "rawf32")
    np.testing.assert_array_equal(read_image(tmp_path / "x.raw").data, img.data)
    q = np.round(img.data * 255) / 255
    write_image(tmp_path / "x.pgm", img, "pgm8")
    np.testing.assert_allclose(read_image(tmp_path / "x.pgm").data, q, atol=1e-7)
    assert decode_image(encode_image(img, "rawf32"), "rawf32").data.tobytes() == img.data.tobytes()


def test_image_rejects_nonfinite():
    with pytest.raises(ValueError):
        Image(np.array([[1.0, np.inf]]))


def test_mirror_pad_row():
    img = Image(np.array([[1.0, 2.0, 3.0]] * 3))
    np.testing.assert_array_equal(mirror_pad(img, 1).data[1], [2, 1, 2, 3, 2])


def test_mirror_pad_zero_and_limits():
    img = Image(np.arange(9.0).reshape(3, 3))
    assert mirror_pad(img, 0) is img
    with pytest.raises(ValueError):
        mirror_pad(img, 3)


def test_mirror_pad_corner():
    img = Image(np.arange(9.0).reshape(3, 3))
    # padded index -2 reflects to 2 on both axes
    assert mirror_pad(img, 2).data[0, 0] == img.data[2, 2]


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 9), st.integers(2, 9), st.integers(0, 8), st.integers(0, 2 ** 31))
def test_mirror_pad_crop_recovers(h, w, pad, seed):
    pad = min(pad, min(h, w) - 1)
    img = Image(np.random.default_rng(seed).random((h, w)).astype(np.float32))
    out = mirror_pad(img, pad).data
    assert out[pad:pad + h, pad:pad + w].tobytes() == img.data.tobytes()


def test_sample_integer_coordinates():
    data = np.random.default_rng(1).random((8, 6)).astype(np.float32)
    assert bilinear_sample(Image(data), 3, 5) == data[5, 3]


def test_sample_midpoint():
    assert bilinear_sample(Image(np.array([[0.0, 1.0]])), 0.5, 0) == 0.5


def test_sample_four_term():
    p = np.array([[0.1, 0.7], [0.4, 0.9]])
    x, y = 0.25, 0.75
    # (1-x)(1-y) p00 + x(1-y) p01 + (1-x) y p10 + x y p11
    expect = 0.75 * 0.25 * 0.1 + 0.25 * 0.25 * 0.7 + 0.75 * 0.75 * 0.4 + 0.25 * 0.75 * 0.9
    assert bilinear_sample(Image(p), x, y) == pytest.approx(expect, abs=1e-15)


def test_sample_clamps_and_rejects_nan():
    img = Image(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert bilinear_sample(img, -5, -5) == 1.0
    assert bilinear_sample(img, 10, 10) == 4.0
    with pytest.raises(ValueError):
        sample(img, np.array([np.nan]), np.array([0.0]))


@settings(max_examples=50, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-1, 1),
       st.floats(0, 14), st.floats(0, 10))
def test_sample_exact_on_affine_images(a, b, c, x, y):
    yy, xx = np.mgrid[0:11, 0:15].astype(np.float64)
    img = Image(a * xx + b * yy + c)
    got = bilinear_sample(img, x, y)
    want = a * x + b * y + c
    scale = abs(a) * 15 + abs(b) * 11 + abs(c) + 1e-300
    assert abs(got - want) <= 4 * np.finfo(np.float64).eps * scale


def test_extract_patch_aligned_crop():
    data = np.random.default_rng(2).random((40, 40)).astype(np.float32)
    L = 9
    # radius (L-1)/2 with an odd side puts every sample on a pixel center
    kp = Keypoint(20.0, 17.0, sigma=(L - 1) / 2 * 2 / 12, theta=0.0)
    patch = extract_patch(Image(data), cartesian_grid(kp, GridSpec(L, 12, "cartesian")))
    np.testing.assert_array_equal(patch.data, data[13:22, 16:25])


def test_extract_patch_constant_and_deterministic():
    img = Image(np.full((30, 30), 0.37, np.float32))
    g = cartesian_grid(Keypoint(10.3, 12.9, 2.0, 1.1), GridSpec(32, 12, "cartesian"))
    p1, p2 = extract_patch(img, g), extract_patch(img, g)
    assert np.all(p1.data == np.float32(0.37))
    assert p1.data.tobytes() == p2.data.tobytes()
