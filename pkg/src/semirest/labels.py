"""Block-level labels from pixel masks or bounding boxes, and simulated defects."""
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numeric import bilinear_resize

NORMAL = 0
ANOMALY = 1
UNKNOWN = -1
IGNORED = 255


@dataclass
class BlockLabelMap:
    map: np.ndarray
    beta: int


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive pixel rectangle."""

    r0: int
    c0: int
    r1: int
    c1: int

    def validate(self, image_extent):
        h, w = image_extent
        if not (0 <= self.r0 <= self.r1 < h and 0 <= self.c0 <= self.c1 < w):
            raise ValueError(f"box {self} is malformed or outside a {h}x{w} image")


def _block_sums(pixels, block_extent):
    bh, bw = block_extent
    h, w = pixels.shape
    if h % bh or w % bw:
        raise ValueError(f"image extent {h}x{w} is not divisible by block extent {bh}x{bw}")
    return pixels.reshape(h // bh, bh, w // bw, bw).sum(axis=(1, 3)), bh * bw


def blocks_from_pixels(pixels, block_extent, eps_plus=0.5, eps_minus=0.08):
    """Block labels from a binary pixel mask.

    A block is anomalous when its anomaly-pixel count exceeds
    ``eps_plus * beta``, normal when below ``eps_minus * beta`` and
    ``IGNORED`` otherwise (both comparisons strict).
    """
    if not 0 <= eps_minus <= eps_plus <= 1:
        raise ValueError(f"need 0 <= eps_minus <= eps_plus <= 1, got {eps_minus}, {eps_plus}")
    counts, beta = _block_sums((np.asarray(pixels) > 0).astype(np.int64), block_extent)
    out = np.full(counts.shape, IGNORED, dtype=np.int64)
    out[counts > eps_plus * beta] = ANOMALY
    out[counts < eps_minus * beta] = NORMAL
    return BlockLabelMap(out, beta)


def pixels_from_boxes(boxes, image_extent):
    """Pixel map with ``UNKNOWN`` inside the union of boxes and ``NORMAL`` elsewhere."""
    out = np.zeros(image_extent, dtype=np.int64)
    for b in boxes:
        b.validate(image_extent)
        out[b.r0:b.r1 + 1, b.c0:b.c1 + 1] = UNKNOWN
    return out


def blocks_from_boxes(boxes, image_extent, block_extent, upsilon=0.5):
    if not 0 <= upsilon <= 1:
        raise ValueError(f"upsilon must lie in [0, 1], got {upsilon}")
    pixels = pixels_from_boxes(boxes, image_extent)
    counts, beta = _block_sums(np.abs(pixels), block_extent)
    out = np.where(counts > upsilon * beta, UNKNOWN, NORMAL).astype(np.int64)
    return BlockLabelMap(out, beta)


def boxes_from_mask(mask):
    """Tight boxes around the 8-connected components of a binary mask."""
    from scipy import ndimage

    labeled, n = ndimage.label(np.asarray(mask) > 0, structure=np.ones((3, 3)))
    boxes = []
    for sl in ndimage.find_objects(labeled):
        boxes.append(BoundingBox(sl[0].start, sl[1].start, sl[0].stop - 1, sl[1].stop - 1))
    return boxes


def read_boxes(path):
    boxes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 'r0 c0 r1 c1', got {line!r}")
        boxes.append(BoundingBox(*(int(p) for p in parts)))
    return boxes


def write_boxes(path, boxes):
    Path(path).write_text("".join(f"{b.r0} {b.c0} {b.r1} {b.c1}\n" for b in boxes))


def _smooth_noise(rng, h, w, cells):
    grid = rng.random((cells + 1, cells + 1))
    return bilinear_resize(grid, h, w)


def synth_anomalies(image, mask_seed, max_fraction=0.25, radius_range=(0.1, 0.2), max_blobs=3):
    """Paste between one and ``max_blobs`` smooth-noise blobs onto ``image``.

    Each blob is a slightly wobbly ellipse filled with a smooth random
    texture at a random intensity. The mask marks exactly the pasted pixels
    and never exceeds ``max_fraction`` of the image.

    Returns:
        ``(corrupted, mask)`` with ``mask`` an int64 map of 0/1.
    """
    img = np.asarray(image)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, c = img.shape
    rng = np.random.default_rng(mask_seed)
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    side = min(h, w)
    limit = max_fraction * h * w

    mask = np.zeros((h, w), dtype=bool)
    out = img.astype(np.float64).copy()
    mean_color = out.reshape(-1, c).mean(axis=0)
    n_blobs = int(rng.integers(1, max_blobs + 1))
    for i in range(n_blobs):
        radius = rng.uniform(*radius_range) * side
        aspect = rng.uniform(0.6, 1.6)
        angle = rng.uniform(0, np.pi)
        cr, ccol = rng.uniform(radius, h - radius), rng.uniform(radius, w - radius)
        wobble = _smooth_noise(rng, h, w, 4) - 0.5
        texture = _smooth_noise(rng, h, w, 6)
        tint = rng.uniform(0.8, 1.2, size=c)
        sign = rng.choice([-1.0, 1.0])
        amplitude = rng.uniform(0.35, 0.4)
        strength = rng.uniform(0.9, 1.0)

        dr, dc = rr - cr, cc - ccol
        u = (dr * np.cos(angle) + dc * np.sin(angle)) / (radius * aspect)
        v = (-dr * np.sin(angle) + dc * np.cos(angle)) * aspect / radius
        blob = (u * u + v * v) + 0.2 * wobble < 1.0
        blob[int(np.clip(round(cr), 0, h - 1)), int(np.clip(round(ccol), 0, w - 1))] = True
        union = mask | blob
        if union.sum() > limit:
            if i == 0:
                # shrink the first blob onto its center until it fits
                while blob.sum() > limit:
                    blob &= (u * u + v * v) < 0.8 * ((u * u + v * v)[blob].max())
            else:
                continue
        fill = mean_color[None, None, :] + sign * amplitude * tint[None, None, :] * (0.5 + texture[:, :, None])
        pasted = (1 - strength) * out + strength * fill
        out = np.where(blob[:, :, None], pasted, out)
        mask |= blob

    out = np.clip(out, 0.0, 1.0).astype(img.dtype)
    # clipping can only touch pasted pixels; outside the mask the input is untouched
    out = np.where(mask[:, :, None], out, img)
    if squeeze:
        out = out[:, :, 0]
    return out, mask.astype(np.int64)
