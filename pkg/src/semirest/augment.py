"""Residual-space augmentations: k-NN resampling and random PCR dropout."""
from dataclasses import dataclass

import numpy as np

from .memory_bank import Pcr, knn_search, residual
from .transformer import TokenTensor


@dataclass
class AugmentationConfig:
    alpha1: float = 0.5
    alpha2: float = 0.8
    dropout_alpha: float = 0.25
    noise_log_sigma: float = 0.2
    noise_clip: float = 0.223
    noise_per: str = "element"
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 <= self.alpha1 <= self.alpha2 <= 1:
            raise ValueError("need 0 <= alpha1 <= alpha2 <= 1")
        if not 0 <= self.dropout_alpha <= 1:
            raise ValueError("dropout_alpha must lie in [0, 1]")
        if self.noise_per not in ("element", "vector"):
            raise ValueError("noise_per must be 'element' or 'vector'")


def branch_from_tau(tau, cfg):
    """Neighbor rank (0, 1 or 2) selected by a uniform draw."""
    tau = np.asarray(tau)
    return np.where(tau <= cfg.alpha1, 0, np.where(tau <= cfg.alpha2, 1, 2))


def sample_delta(rng, shape, cfg):
    """Multiplicative noise ``exp(z)`` with ``z ~ N(0, sigma)`` clamped to the clip range."""
    if cfg.noise_per == "vector":
        z = rng.normal(0.0, cfg.noise_log_sigma, size=shape[:-1] + (1,))
        z = np.broadcast_to(z, shape)
    else:
        z = rng.normal(0.0, cfg.noise_log_sigma, size=shape)
    return np.exp(np.clip(z, -cfg.noise_clip, cfg.noise_clip))


def knn_residual_augment(bank, query, cfg, mode="square", rng=None, tau=None, delta=None):
    """Residual against the 1st, 2nd or 3rd neighbor chosen at random, times noise.

    ``tau`` and ``delta`` may be forced; otherwise they are drawn from ``rng``.
    """
    if len(bank) < 3:
        raise ValueError(f"k-NN augmentation needs at least 3 bank entries, bank has {len(bank)}")
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    query = np.asarray(query, dtype=np.float64)
    if tau is None:
        tau = rng.random()
    idx, _ = knn_search(bank, query[None], 3)
    j = idx[0, int(branch_from_tau(tau, cfg))]
    r = residual(query - bank.entries[j].astype(np.float64), mode)
    if delta is None:
        delta = sample_delta(rng, r.shape, cfg)
    return Pcr((r * delta).astype(np.float32))


def neighbor_differences(bank, pcf, k=3):
    """``pcf - neighbor_j`` for the ``k`` nearest bank entries of every cell.

    Returns an array of shape ``h x w x k x d``; cached per image so that
    augmentation draws only need the random branch and noise.
    """
    t = np.asarray(pcf)
    h, w, d = t.shape
    flat = t.reshape(-1, d).astype(np.float64)
    idx, _ = knn_search(bank, flat, k)
    diffs = flat[:, None, :] - bank.entries[idx].astype(np.float64)
    return diffs.reshape(h, w, k, d).astype(np.float32)


def augment_residual_map(diffs, cfg, rng, mode="square"):
    """Vectorized k-NN augmentation over cached neighbor differences."""
    h, w, _, d = diffs.shape
    branch = branch_from_tau(rng.random((h, w)), cfg)
    chosen = np.take_along_axis(diffs, branch[:, :, None, None], axis=2)[:, :, 0, :]
    delta = sample_delta(rng, (h, w, d), cfg)
    return (residual(chosen, mode) * delta).astype(np.float32)


def random_pcr_dropout(tokens, alpha, seed=None, rng=None):
    """Zero whole tokens independently with probability ``alpha``.

    Accepts a :class:`TokenTensor` or an array whose last axis is the token
    channel axis; the return type follows the input.
    """
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    rng = np.random.default_rng(seed) if rng is None else rng
    arr = tokens.tensor if isinstance(tokens, TokenTensor) else np.asarray(tokens)
    keep = rng.random(arr.shape[:-1]) >= alpha
    out = arr * keep[..., None].astype(arr.dtype)
    if isinstance(tokens, TokenTensor):
        return TokenTensor(out, tokens.rho)
    return out
