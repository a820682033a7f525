"""Small numeric kernels shared by the feature, matching and evaluation code.

Dense tensors are plain row-major ``numpy.ndarray`` objects. Production paths
run in float32; gradient checks and metric oracles use float64.
"""
import math

import numpy as np
from scipy import ndimage


def elementwise_square(v):
    v = np.asarray(v)
    return v * v


def elementwise_abs(v):
    return np.abs(np.asarray(v))


def l2_distance(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.sqrt(np.sum(diff * diff)))


def _axis_coords(n_in, n_out, align_corners):
    if n_in == 1 or (align_corners and n_out == 1):
        pos = np.zeros(n_out)
    elif align_corners:
        # output index 0 -> input 0, output n_out-1 -> input n_in-1
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    else:
        # pixel centers line up: a stride-8 cell center lands on pixel 8i+3.5
        pos = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    lo = np.clip(lo, 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def bilinear_resize(arr, out_h, out_w, align_corners=False):
    """Resize a 2-D map with bilinear interpolation.

    By default sample centers are aligned (the usual image-resize
    convention); ``align_corners=True`` maps output corners onto input
    corners instead. Interpolation is written as ``a + t * (b - a)`` so
    constant regions are reproduced exactly.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target extent must be positive, got {out_h}x{out_w}")
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError("bilinear_resize expects a 2-D map")
    h, w = arr.shape
    if (h, w) == (out_h, out_w):
        return arr.copy()
    dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float64
    arr = arr.astype(dtype, copy=False)

    lo, hi, frac = _axis_coords(h, out_h, align_corners)
    frac = frac.astype(dtype)[:, None]
    top = arr[lo, :]
    rows = top + frac * (arr[hi, :] - top)

    lo, hi, frac = _axis_coords(w, out_w, align_corners)
    frac = frac.astype(dtype)[None, :]
    left = rows[:, lo]
    return left + frac * (rows[:, hi] - left)


def gaussian_kernel(sigma, radius=None):
    if radius is None:
        radius = int(math.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(arr, sigma, radius=None):
    """Separable Gaussian smoothing with half-sample reflect padding.

    The kernel is truncated at ``ceil(4 * sigma)`` unless ``radius`` is given
    and normalized to unit sum.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    arr = np.asarray(arr)
    if sigma == 0:
        return arr.copy()
    dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float64
    k = gaussian_kernel(sigma, radius)
    out = arr.astype(np.float64)
    for axis in range(out.ndim):
        out = ndimage.correlate1d(out, k, axis=axis, mode="reflect")
    return out.astype(dtype, copy=False)
