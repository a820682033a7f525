"""Synthetic desk-scale dataset and the fixed on-disk layout.

Layout under a dataset root::

    train/normal/<stem>.ppm
    test/normal/<stem>.ppm
    test/defect/<stem>.ppm
    masks/<stem>.srlb      one per test image (all-zero for normal images)
    boxes/<stem>.txt       one per defect image, "r0 c0 r1 c1" per line
    features/<stem>.srft   optional precomputed feature maps
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import containers
from .errors import ConfigError, DataError
from .labels import boxes_from_mask, read_boxes, synth_anomalies, write_boxes

# one large defect per test image keeps the share of blurred boundary pixels low
BENCH_DEFECTS = {"radius_range": (0.2, 0.28), "max_blobs": 1}


def _read_token(buf, pos):
    while True:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        break
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def read_pnm(path):
    """Read a binary PGM (P5) or PPM (P6) image as float32 in ``[0, 1]``."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: not a binary PGM/PPM file")
    w, pos = _read_token(buf, pos)
    h, pos = _read_token(buf, pos)
    maxval, pos = _read_token(buf, pos)
    w, h, maxval = int(w), int(h), int(maxval)
    channels = 3 if magic == b"P6" else 1
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h * channels
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos + 1)
    img = data.reshape(h, w, channels).astype(np.float32) / maxval
    return img


def write_pnm(path, img):
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    magic = b"P6" if c == 3 else b"P5"
    raw = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + raw.tobytes())


def make_texture(rng, size, base):
    """Periodic woven texture with a random phase and a little grain."""
    h, w = size
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    weave = (
        np.sin(2 * np.pi * cc / 8.0 + phase[0]) * np.sin(2 * np.pi * rr / 8.0 + phase[1])
        + 0.5 * np.sin(2 * np.pi * (rr + cc) / 16.0 + phase[2])
    )
    grain = rng.normal(0.0, 0.02, size=(h, w))
    lum = 0.5 + 0.18 * weave + grain
    img = lum[:, :, None] * base[None, None, :] * 1.6
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_dataset(out_dir, n_normal=32, n_defect=16, n_test_normal=None, seed=0, size=64):
    """Write a seeded textured dataset with pasted defects.

    ``n_normal`` training images plus ``n_test_normal`` (default
    ``n_defect``) normal and ``n_defect`` defective test images.
    """
    out = Path(out_dir)
    n_test_normal = n_defect if n_test_normal is None else n_test_normal
    dirs = {k: out / k for k in ("train/normal", "test/normal", "test/defect", "masks", "boxes")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(seed)
    tex_seq, anomaly_seq = root.spawn(2)
    rng = np.random.default_rng(tex_seq)
    base = np.array([0.55, 0.45, 0.35]) + rng.uniform(-0.05, 0.05, size=3)

    for i in range(n_normal):
        write_pnm(dirs["train/normal"] / f"train_{i:03d}.ppm", make_texture(rng, (size, size), base))
    for i in range(n_test_normal):
        stem = f"normal_{i:03d}"
        write_pnm(dirs["test/normal"] / f"{stem}.ppm", make_texture(rng, (size, size), base))
        containers.write_label_map(dirs["masks"] / f"{stem}.srlb", np.zeros((size, size), np.uint8))
    anomaly_seeds = anomaly_seq.generate_state(max(n_defect, 1))
    for i in range(n_defect):
        stem = f"defect_{i:03d}"
        clean = make_texture(rng, (size, size), base)
        img, mask = synth_anomalies(clean, int(anomaly_seeds[i]), **BENCH_DEFECTS)
        write_pnm(dirs["test/defect"] / f"{stem}.ppm", img)
        containers.write_label_map(dirs["masks"] / f"{stem}.srlb", mask.astype(np.uint8))
        write_boxes(dirs["boxes"] / f"{stem}.txt", boxes_from_mask(mask))
    return out


@dataclass
class ImageItem:
    name: str
    image: np.ndarray
    mask: np.ndarray = None
    boxes: list = field(default=None)
    # precomputed backbone features, used instead of the toy extractor when present
    feature_path: Path = None


@dataclass
class DatasetSplit:
    """Images of a dataset root, loaded into memory."""

    root: Path
    train_normal: list
    test_normal: list
    test_defect: list
    has_boxes: bool

    def labeled_defects(self, n):
        """The first ``n`` defect images, moved out of the test split."""
        return self.test_defect[:n]

    def evaluation_defects(self, n_labeled):
        return self.test_defect[n_labeled:]


def _stems(folder):
    return sorted(p for p in Path(folder).glob("*.ppm")) if Path(folder).is_dir() else []


def load_dataset(root, require_boxes=False):
    root = Path(root)
    train = _stems(root / "train" / "normal")
    if not train:
        raise ConfigError(f"{root}: train/normal is missing or empty")
    has_boxes = (root / "boxes").is_dir()
    if require_boxes and not has_boxes:
        raise ConfigError(f"{root}: semi-supervised training needs a boxes/ directory")

    def load_test(folder, defect):
        items = []
        for p in _stems(folder):
            mask_path = root / "masks" / f"{p.stem}.srlb"
            mask = None
            if mask_path.exists():
                mask, _ = containers.read_label_map(mask_path)
                mask = (mask == 1).astype(np.int64)
            elif defect:
                raise DataError(f"{p}: no mask at {mask_path}")
            boxes = None
            if defect and has_boxes:
                box_path = root / "boxes" / f"{p.stem}.txt"
                boxes = read_boxes(box_path) if box_path.exists() else None
            items.append(ImageItem(p.stem, read_pnm(p), mask, boxes, _features(p.stem)))
        return items

    def _features(stem):
        path = root / "features" / f"{stem}.srft"
        return path if path.exists() else None

    return DatasetSplit(
        root,
        [ImageItem(p.stem, read_pnm(p), feature_path=_features(p.stem)) for p in train],
        load_test(root / "test" / "normal", False),
        load_test(root / "test" / "defect", True),
        has_boxes,
    )
