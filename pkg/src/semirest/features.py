"""Feature maps, position codes and position-constrained features (PCFs).

Real deployments ingest precomputed backbone features through the ``SRFT``
file format. For self-contained runs :func:`toy_extract` produces a stride-8
feature map with two seeded random-projection convolution stages.
"""
from dataclasses import dataclass, field

import numpy as np

from . import containers

STRIDE = 8


@dataclass
class FeatureMap:
    tensor: np.ndarray
    source_image_id: str = ""
    image_extent: tuple = None

    def __post_init__(self):
        t = self.tensor
        if t.ndim != 3:
            raise ValueError(f"feature map must be h x w x d, got shape {t.shape}")
        h, w, d = t.shape
        if h < 1 or w < 1:
            raise ValueError("feature map extents must be positive")
        if d < 4 or d % 4:
            raise ValueError(f"channel count must be a positive multiple of 4, got {d}")
        if self.image_extent is None:
            self.image_extent = (h * STRIDE, w * STRIDE)
        self.image_extent = tuple(int(v) for v in self.image_extent)

    @property
    def shape(self):
        return self.tensor.shape


@dataclass
class PositionCode:
    vector: np.ndarray
    position: tuple


@dataclass
class PcfMap:
    tensor: np.ndarray
    lambda_pe: float
    source_image_id: str = ""
    image_extent: tuple = field(default=None)


def _avg_pool(x, k):
    h, w, d = x.shape
    return x.reshape(h // k, k, w // k, k, d).mean(axis=(1, 3))


def toy_extract(image, seed=0, d_f=64, image_id=""):
    """Deterministic stand-in for a pretrained CNN backbone.

    Two pointwise random-projection convolutions with ``tanh``
    nonlinearities; the first is followed by a 2x average pool, the second by
    a 4x pool, so the output stride is 8. Pointwise kernels keep the
    receptive field inside one output cell, which keeps residual maps sharp.

    Args:
        image: ``h x w x c`` array with values roughly in ``[0, 1]``.
        seed: Seed of the projection weights.
        d_f: Output channel count (multiple of 4).

    Returns:
        A :class:`FeatureMap` of shape ``h/8 x w/8 x d_f``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    if h % STRIDE or w % STRIDE:
        raise ValueError(f"image extent {h}x{w} is not divisible by stride {STRIDE}")
    rng = np.random.default_rng(seed)
    hidden = 32
    w1 = rng.standard_normal((c, hidden)) / np.sqrt(c)
    b1 = rng.standard_normal(hidden) * 0.5
    w2 = rng.standard_normal((hidden, d_f)) * (1.5 / np.sqrt(hidden))
    b2 = rng.standard_normal(d_f) * 0.1

    x = np.tanh((image - 0.5) @ w1 + b1)
    x = _avg_pool(x, 2)
    x = np.tanh(x @ w2 + b2)
    x = _avg_pool(x, 4)
    return FeatureMap(x.astype(np.float32), image_id, (h, w))


def smooth_hypercolumns(fm):
    """Average each feature vector over its 3x3 neighborhood.

    Border positions average over their in-bounds neighbors only.
    """
    t = np.asarray(fm.tensor)
    h, w, _ = t.shape
    acc = np.zeros_like(t, dtype=np.float64)
    count = np.zeros((h, w, 1))
    tp = np.pad(t.astype(np.float64), ((1, 1), (1, 1), (0, 0)))
    ones = np.pad(np.ones((h, w, 1)), ((1, 1), (1, 1), (0, 0)))
    for dr in range(3):
        for dc in range(3):
            acc += tp[dr:dr + h, dc:dc + w]
            count += ones[dr:dr + h, dc:dc + w]
    out = (acc / count).astype(t.dtype)
    return FeatureMap(out, fm.source_image_id, fm.image_extent)


def _frequencies(d_f):
    quarter = d_f // 4
    k = np.arange(quarter, dtype=np.float64)
    return 1.0 / 10000.0 ** (8.0 * k / d_f)


def position_code(p, d_f, rho=1):
    """Sinusoidal code of a grid position ``p = (row, col)``.

    Quarters hold sin(col), cos(col), sin(row), cos(row), each at the
    geometric frequency ladder ``10000 ** (-8k / d_f)``.
    """
    if d_f % 4 or d_f < 4:
        raise ValueError(f"d_f must be a positive multiple of 4, got {d_f}")
    if rho < 1:
        raise ValueError("rho must be >= 1")
    r, c = p
    if r < 0 or c < 0:
        raise ValueError("grid coordinates must be non-negative")
    freq = _frequencies(d_f)
    cs = (c / rho) * freq
    rs = (r / rho) * freq
    vec = np.concatenate([np.sin(cs), np.cos(cs), np.sin(rs), np.cos(rs)])
    return PositionCode(vec, (int(r), int(c)))


def position_field(h_f, w_f, d_f, rho=1):
    """Position codes for every cell of an ``h_f x w_f`` grid (float64)."""
    freq = _frequencies(d_f)
    cs = (np.arange(w_f)[:, None] / rho) * freq
    rs = (np.arange(h_f)[:, None] / rho) * freq
    col_part = np.concatenate([np.sin(cs), np.cos(cs)], axis=1)
    row_part = np.concatenate([np.sin(rs), np.cos(rs)], axis=1)
    out = np.empty((h_f, w_f, d_f))
    out[:, :, : d_f // 2] = col_part[None, :, :]
    out[:, :, d_f // 2:] = row_part[:, None, :]
    return out


def make_pcf(fm, lambda_pe, rho=1):
    if lambda_pe < 0:
        raise ValueError("lambda_pe must be non-negative")
    t = np.asarray(fm.tensor)
    h, w, d = t.shape
    pcf = t + lambda_pe * position_field(h, w, d, rho)
    return PcfMap(pcf.astype(t.dtype), float(lambda_pe), fm.source_image_id, fm.image_extent)


def write_feature_file(fm, path):
    containers.write_map(path, fm.tensor, fm.image_extent, magic=b"SRFT")


def read_feature_file(path, image_id=""):
    data, extent = containers.read_map(path, magic=b"SRFT")
    return FeatureMap(data, image_id, extent)
