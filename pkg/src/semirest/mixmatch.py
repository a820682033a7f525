"""Semi-supervised fine-tuning from box-derived block labels (MixMatch variant).

Random draws inside :func:`mixmatch_step` happen in a fixed order from one
generator, so the step can be replayed exactly:

1. k-NN augmentation, for copy ``j`` then window ``b``: branch draws
   ``(h, w)`` followed by noise ``(h, w, d)``;
2. per mixing group, a permutation of the group's tokens, then one Beta
   draw per token (skipped when the mixing weight is forced);
3. one uniform per token of the re-tensorized copies for dropout.
"""
from dataclasses import dataclass

import numpy as np
import torch
from loguru import logger

from .augment import augment_residual_map, random_pcr_dropout
from .errors import ConfigError
from .labels import NORMAL, UNKNOWN
from .training import (
    MIX, SAMPLE, _check_loss, focal_batch_loss, optimizer_step, parameter_grads,
    sample_training_windows, stream,
)
from .transformer import ema_update, tokenize


def sharpen(p, gamma):
    """Two-class temperature sharpening ``p^(1/g) / (p^(1/g) + (1-p)^(1/g))``."""
    if gamma <= 0:
        raise ValueError(f"sharpening temperature must be positive, got {gamma}")
    p = np.asarray(p, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    a = p ** (1.0 / gamma)
    b = (1.0 - p) ** (1.0 / gamma)
    out = a / (a + b)
    return float(out) if out.ndim == 0 else out


def ramp_weight(step, lambda_u_max, ramp_steps):
    if step < 0:
        raise ValueError("step must be non-negative")
    if ramp_steps == 0:
        return float(lambda_u_max)
    return float(lambda_u_max) * min(1.0, step / ramp_steps)


def guess_labels(model, copies, gamma):
    """Sharpened mean anomaly confidence over the leading copy axis.

    ``copies`` has shape ``(M, ..., mu, mu, d_t)``; the result drops the copy axis.
    """
    copies = np.asarray(copies)
    m = copies.shape[0]
    if m == 0:
        raise ValueError("need at least one augmented copy")
    x = torch.as_tensor(copies.reshape((-1,) + copies.shape[-3:]), dtype=model.dtype)
    with torch.no_grad():
        conf = model(x)[..., 1].double().numpy()
    conf = conf.reshape(copies.shape[:-1])
    return sharpen(conf.mean(axis=0), gamma)


def mixup_pair(a, b, beta_param, seed=None, lam=None):
    """MixUp of two ``(token, label)`` pairs with ``a`` kept dominant."""
    if lam is None:
        lam = np.random.default_rng(seed).beta(beta_param, beta_param)
        lam = max(lam, 1.0 - lam)
    ta, la = a
    tb, lb = b
    token = lam * np.asarray(ta) + (1.0 - lam) * np.asarray(tb)
    return token, lam * la + (1.0 - lam) * lb


@dataclass
class SemiBatch:
    """Windows with box-derived labels.

    ``diffs`` holds ``(B, mu*rho, mu*rho, 3, d_f)`` neighbor differences and
    ``labels`` the ``(B, mu, mu)`` block labels in ``{0, -1}``.
    """

    diffs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        bad = ~np.isin(self.labels, (NORMAL, UNKNOWN))
        if bad.any():
            raise ValueError("semi-supervised labels must be 0 (normal) or -1 (unknown)")
        if self.diffs.shape[0] != self.labels.shape[0]:
            raise ValueError("diffs and labels disagree on the batch size")


@dataclass
class MixMatchOutput:
    loss: torch.Tensor
    l_x: torch.Tensor
    l_u: torch.Tensor
    weight: float
    copies: np.ndarray
    guess: np.ndarray
    mixed_tokens: np.ndarray
    mixed_labels: np.ndarray
    y_star: np.ndarray
    confidences: torch.Tensor


def _log_p_correct(logits, soft):
    # log((1 - s)(1 - y) + s*y) for soft target s and confidence y
    z = logits[..., 1] - logits[..., 0]
    log_y = torch.nn.functional.logsigmoid(z)
    log_1my = torch.nn.functional.logsigmoid(-z)
    s = torch.as_tensor(soft, dtype=logits.dtype)
    log_p = torch.logaddexp(torch.log1p(-s) + log_1my, torch.log(s) + log_y)
    y = log_y.exp()
    one_minus_p = s * (1 - y) + (1 - s) * y
    return log_p, one_minus_p, y


def _set_loss(log_p, one_minus_p, soft, members, alpha, gamma):
    if not bool(members.any()):
        return log_p.new_zeros(())
    s = torch.as_tensor(soft, dtype=log_p.dtype)
    w = torch.where(s > 0.5, torch.full_like(s, alpha), torch.full_like(s, 1 - alpha))
    terms = w * one_minus_p.pow(gamma) * log_p
    return -terms[members].sum() / int(members.sum())


def mixmatch_step(model, batch, cfg, step, rng=None, lam=None):
    """Labeled/unlabeled MixMatch loss of one batch.

    Args:
        model: The classifier; gradients flow through the final forward only.
        batch: A :class:`SemiBatch`.
        cfg: A ``TrainConfig``; uses its ``mixmatch`` block, augmentation and
            residual settings and ``dropout_alpha``.
        step: Fine-tuning step, drives the unlabeled-loss ramp.
        rng: Generator for every random draw (see module docstring).
        lam: Optional forced mixing weight ``lambda'`` (scalar).

    Returns:
        A :class:`MixMatchOutput` whose ``loss`` is ``L_x + ramp(step) * L_u``.
    """
    mm = cfg.mixmatch
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    aug = cfg.augmentation()
    n_win, mu = batch.labels.shape[0], batch.labels.shape[1]
    if n_win == 0:
        raise ValueError("empty MixMatch batch")

    copies = np.stack([
        np.stack([tokenize(augment_residual_map(batch.diffs[b], aug, rng, cfg.residual_mode), cfg.rho).tensor
                  for b in range(n_win)])
        for _ in range(mm.M)
    ])
    guess = guess_labels(model, copies, mm.gamma)

    d_t = copies.shape[-1]
    x = copies.reshape(-1, d_t).astype(np.float64)
    y_star = np.broadcast_to(batch.labels, (mm.M,) + batch.labels.shape).reshape(-1)
    y_bar = np.broadcast_to(guess, (mm.M,) + guess.shape).reshape(-1)
    target = np.where(y_star == NORMAL, 0.0, y_bar)

    if mm.mix_scope == "batch":
        groups = [np.arange(x.shape[0])]
    else:
        owner = np.broadcast_to(np.arange(n_win)[None, :, None, None], (mm.M, n_win, mu, mu)).reshape(-1)
        groups = [np.flatnonzero(owner == b) for b in range(n_win)]

    mixed_x = np.empty_like(x)
    mixed_y = np.empty_like(target)
    for g in groups:
        sources = np.concatenate([g[y_star[g] == NORMAL], g[y_star[g] == UNKNOWN]])
        partners = sources[rng.permutation(len(sources))]
        if lam is None:
            lam_g = rng.beta(mm.mixup_beta, mm.mixup_beta, size=len(sources))
            lam_g = np.maximum(lam_g, 1.0 - lam_g)
        else:
            lam_g = np.full(len(sources), float(lam))
        mixed_x[sources] = lam_g[:, None] * x[sources] + (1 - lam_g[:, None]) * x[partners]
        mixed_y[sources] = lam_g * target[sources] + (1 - lam_g) * target[partners]

    tensors = mixed_x.reshape(copies.shape)
    tensors = random_pcr_dropout(tensors, cfg.dropout_alpha, rng=rng)

    logits = model.logits(torch.as_tensor(tensors.reshape((-1,) + tensors.shape[-3:]), dtype=model.dtype))
    logits = logits.reshape(-1, 2)
    log_p, one_minus_p, conf = _log_p_correct(logits, mixed_y)
    known = torch.as_tensor(y_star == NORMAL)
    unknown = torch.as_tensor(y_star == UNKNOWN)
    l_x = _set_loss(log_p, one_minus_p, mixed_y, known, mm.alpha_x, mm.gamma_x)
    l_u = _set_loss(log_p, one_minus_p, mixed_y, unknown, mm.alpha_u, mm.gamma_u)
    weight = ramp_weight(step, mm.lambda_u, mm.ramp_steps)
    return MixMatchOutput(
        l_x + weight * l_u, l_x, l_u, weight, copies, guess,
        tensors, mixed_y.reshape(copies.shape[:-1]), y_star.reshape(copies.shape[:-1]), conf,
    )


def semi_batch(windows):
    return SemiBatch(np.stack([w.diffs for w in windows]), np.stack([w.labels for w in windows]))


def semi_step_loss(model, data, cfg, step, local_step):
    """Loss of one fine-tuning step.

    Even local steps run MixMatch on box-labeled real windows, odd ones the
    focal loss on normal and simulated windows. Without normal or simulated
    images in the batch every step is a MixMatch step.
    """
    seq = np.random.SeedSequence([cfg.seed, step, SAMPLE])
    if local_step % 2 == 1 and cfg.b1 + cfg.b2 > 0:
        windows = sample_training_windows(data, cfg, seq, categories=("normal", "simulated"))
        return focal_batch_loss(model, windows, cfg, step), len(windows)
    windows = sample_training_windows(data, cfg, seq, categories=("real",))
    mix = mixmatch_step(model, semi_batch(windows), cfg, local_step, rng=stream(cfg.seed, step, MIX))
    return mix.loss, len(windows)


def finetune_semi(data, state, cfg, on_step=None):
    """Semi-supervised fine-tuning of a pretrained state for ``cfg.steps`` steps."""
    if cfg.b3 == 0 or not data.real:
        raise ConfigError("semi-supervised fine-tuning needs box-labeled defect images and b3 > 0")
    log = []
    start = state.step
    for local in range(cfg.steps):
        step = state.step
        loss, n = semi_step_loss(state.model, data, cfg, step, local)
        _check_loss(loss, step)
        optimizer_step(state, parameter_grads(state.model, loss), cfg.lr, cfg.weight_decay)
        ema_update(state.ema.parameters(), state.model.parameters(), cfg.ema_decay)
        row = (step, float(loss.detach()), cfg.lr, n)
        log.append(row)
        if on_step is not None:
            on_step(row)
        if local % 200 == 0:
            logger.debug("finetune step {} loss {:.6f}", local, row[1])
    logger.debug("fine-tuned steps {}..{}", start, state.step)
    return state, log


def replay_semi_loss(model, data, cfg, step, local_step):
    with torch.no_grad():
        loss, _ = semi_step_loss(model, data, cfg, step, local_step)
    return float(loss)

