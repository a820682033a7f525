import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from semirest.numeric import (
    bilinear_resize, elementwise_abs, elementwise_square, gaussian_blur, gaussian_kernel, l2_distance,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_square_and_abs_examples():
    assert elementwise_square([-1, 2, 0]).tolist() == [1, 4, 0]
    assert elementwise_square([0.5]).tolist() == [0.25]
    assert elementwise_abs([-1, 2, 0]).tolist() == [1, 2, 0]
    assert elementwise_abs([-0.5]).tolist() == [0.5]
    assert not elementwise_square(np.zeros(5)).any()
    assert not elementwise_abs(np.zeros(5)).any()


@given(arrays(np.float64, st.integers(1, 32), elements=finite))
def test_square_is_abs_squared(v):
    sq = elementwise_square(v)
    assert (sq >= 0).all()
    np.testing.assert_array_equal(sq, elementwise_abs(v) ** 2)


def test_l2_distance():
    assert l2_distance([0, 0], [3, 4]) == 5
    a = np.array([0.3, -2.0, 7.0])
    assert l2_distance(a, a) == 0
    assert l2_distance([1, 1, 1, 1], [0, 0, 0, 0]) == 2
    with pytest.raises(ValueError):
        l2_distance([1, 2], [1, 2, 3])


def test_resize_center_value():
    m = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = bilinear_resize(m, 3, 3)
    assert out[1, 1] == pytest.approx(1.5)
    # corner-aligned variant agrees at the center
    assert bilinear_resize(m, 3, 3, align_corners=True)[1, 1] == pytest.approx(1.5)


def test_resize_corner_aligned_hits_corners():
    m = np.arange(12, dtype=np.float64).reshape(3, 4)
    out = bilinear_resize(m, 7, 9, align_corners=True)
    assert out[0, 0] == m[0, 0] and out[-1, -1] == m[-1, -1]
    assert out[0, -1] == m[0, -1] and out[-1, 0] == m[-1, 0]


def test_resize_matches_pixel_center_reference(rng):
    m = rng.random((8, 8))
    out = bilinear_resize(m, 64, 64)
    # independent evaluation of one interior sample
    i, j = 21, 38
    y = (i + 0.5) * 8 / 64 - 0.5
    x = (j + 0.5) * 8 / 64 - 0.5
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    fy, fx = y - y0, x - x0
    ref = ((1 - fy) * (1 - fx) * m[y0, x0] + (1 - fy) * fx * m[y0, x0 + 1]
           + fy * (1 - fx) * m[y0 + 1, x0] + fy * fx * m[y0 + 1, x0 + 1])
    assert out[i, j] == pytest.approx(ref, abs=1e-12)


@given(st.floats(-5, 5, allow_nan=False), st.integers(1, 6), st.integers(1, 6),
       st.integers(1, 40), st.integers(1, 40), st.booleans())
def test_resize_constants_round_trip(c, h, w, oh, ow, corners):
    m = np.full((h, w), c)
    up = bilinear_resize(m, oh, ow, align_corners=corners)
    assert (up == c).all()
    assert (bilinear_resize(up, h, w, align_corners=corners) == c).all()


def test_resize_identity_is_bit_identical(rng):
    m = rng.random((5, 7)).astype(np.float32)
    out = bilinear_resize(m, 5, 7)
    assert out.dtype == m.dtype and np.array_equal(out, m) and out is not m


def test_resize_rejects_bad_extent():
    with pytest.raises(ValueError):
        bilinear_resize(np.zeros((2, 2)), 0, 3)
    with pytest.raises(ValueError):
        bilinear_resize(np.zeros((2, 2)), 3, -1)


def test_blur_examples(rng):
    m = rng.random((16, 16))
    assert np.array_equal(gaussian_blur(m, 0), m)
    np.testing.assert_allclose(gaussian_blur(np.full((20, 20), 0.7), 4), 0.7, rtol=1e-12)
    impulse = np.zeros((65, 65))
    impulse[32, 32] = 1.0
    assert gaussian_blur(impulse, 4).sum() == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValueError):
        gaussian_blur(m, -1)


def test_kernel_radius_and_normalization():
    k = gaussian_kernel(2.5)
    assert len(k) == 2 * math.ceil(10) + 1
    assert k.sum() == pytest.approx(1.0, abs=1e-15)
    assert len(gaussian_kernel(1.0, radius=2)) == 5


@settings(max_examples=30)
@given(st.integers(13, 30), st.integers(13, 30), st.floats(0.3, 3.0))
def test_blur_preserves_interior_mass(h, w, sigma):
    r = math.ceil(4 * sigma)
    m = np.zeros((h + 2 * r, w + 2 * r))
    m[r + h // 2, r + w // 2] = 3.0
    assert gaussian_blur(m, sigma).sum() == pytest.approx(3.0, rel=1e-5)


def test_blur_matches_direct_convolution(rng):
    m = rng.random((9, 11))
    sigma = 1.2
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    padded = np.pad(m, r, mode="symmetric")
    ref = np.zeros_like(m)
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            ref[i, j] = np.sum(np.outer(k, k) * padded[i:i + 2 * r + 1, j:j + 2 * r + 1])
    np.testing.assert_allclose(gaussian_blur(m, sigma), ref, atol=1e-12)
