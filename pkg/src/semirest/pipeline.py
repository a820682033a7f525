"""Glue between images, the memory bank and the classifier."""
from dataclasses import dataclass

import numpy as np

from .augment import neighbor_differences
from .features import make_pcf, read_feature_file, smooth_hypercolumns, toy_extract
from .memory_bank import coreset_subsample, pcr_map
from .metrics import postprocess_map
from .transformer import bag_predict, tokenize


def image_pcf(image, cfg, image_id="", feature_path=None):
    """Features (read from ``feature_path`` or toy-extracted), 3x3 smoothing and position code."""
    if feature_path is not None:
        fm = read_feature_file(feature_path, image_id)
    else:
        fm = toy_extract(image, seed=cfg.extractor_seed, d_f=cfg.d_f, image_id=image_id)
    return make_pcf(smooth_hypercolumns(fm), cfg.lambda_pe, cfg.rho)


def item_pcf(item, cfg):
    return image_pcf(item.image, cfg, item.name, getattr(item, "feature_path", None))


def build_bank(items, cfg):
    """Coreset bank over the PCFs of ``items`` (images or :class:`ImageItem` objects)."""
    pcfs = [item_pcf(it, cfg) if hasattr(it, "image") else image_pcf(it, cfg) for it in items]
    feats = np.concatenate([p.tensor.reshape(-1, p.tensor.shape[-1]) for p in pcfs])
    return coreset_subsample(feats, cfg.coreset_ratio, cfg.seed)


@dataclass
class PreparedImage:
    """Cached neighbor differences of one training image plus its block labels.

    ``diffs`` has shape ``h_f x w_f x 3 x d_f``: query minus its first three
    bank neighbors. ``labels`` is the ``h_t x w_t`` block label map.
    """

    name: str
    diffs: np.ndarray
    labels: np.ndarray


def prepare_image(bank, image, cfg, labels, name="", feature_path=None):
    k = min(3, len(bank))
    pcf = image_pcf(image, cfg, name, feature_path).tensor
    return PreparedImage(name, neighbor_differences(bank, pcf, k), labels)


def block_extent(image_shape, token_shape):
    h, w = image_shape[:2]
    h_t, w_t = token_shape[:2]
    if h % h_t or w % w_t:
        raise ValueError(f"image extent {h}x{w} is not a multiple of the token grid {h_t}x{w_t}")
    return h // h_t, w // w_t


def block_scores(model, bank, image, cfg, feature_path=None):
    pcr = pcr_map(bank, image_pcf(image, cfg, feature_path=feature_path).tensor, cfg.residual_mode)
    return bag_predict(model, tokenize(pcr, cfg.rho), cfg.mu, cfg.step)


def score_image(model, bank, image, cfg, feature_path=None):
    """Pixel-resolution anomaly score map of one image."""
    theta = block_scores(model, bank, image, cfg, feature_path)
    return postprocess_map(theta, np.asarray(image).shape[:2], cfg.sigma)


def oracle_score(bank, image, cfg):
    """Residual norm against the nearest bank entry, post-processed like model output."""
    pcf = image_pcf(image, cfg).tensor
    diff = pcr_map(bank, pcf, "square").astype(np.float64)
    return postprocess_map(np.sqrt(diff.sum(axis=-1)), np.asarray(image).shape[:2], cfg.sigma)
