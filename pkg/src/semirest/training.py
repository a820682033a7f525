"""Focal loss, AdamW/EMA orchestration and the fully supervised training loop.

Randomness is split into per-purpose streams keyed by ``(seed, step,
purpose)`` so that any step's batch can be regenerated on its own.
"""
import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger

from .augment import augment_residual_map, random_pcr_dropout
from .errors import ConfigError, TrainingError
from .labels import blocks_from_boxes, blocks_from_pixels, synth_anomalies
from .memory_bank import residual
from .pipeline import block_extent, prepare_image
from .transformer import build_model, ema_update, enumerate_windows, tokenize

SAMPLE, AUGMENT, DROPOUT, MIX, SIMULATE = range(5)


def stream(seed, step, purpose):
    """Independent generator for one purpose at one step."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(step), int(purpose)]))


# ---------------------------------------------------------------- focal loss


def _as_label_array(labels, like):
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    if labels.shape != like.shape:
        raise ValueError(f"label shape {tuple(labels.shape)} != prediction shape {tuple(like.shape)}")
    return labels


def _focal_from_logs(log_p, log_q, labels, alpha, gamma):
    # log_p = log(p+), log_q = log(1 - p+)
    pos = labels == 1
    neg = labels == 0
    p = log_p.exp()
    q = log_q.exp()
    zero = log_p.new_zeros(())
    pos_term = (alpha * q.pow(gamma) * log_p)[pos].mean() if bool(pos.any()) else zero
    neg_term = ((1 - alpha) * p.pow(gamma) * log_q)[neg].mean() if bool(neg.any()) else zero
    return -(pos_term + neg_term)


def focal_loss(confidences, labels, alpha=0.25, gamma=4.0):
    """Class-set-normalized focal loss on anomaly confidences.

    Positives (label 1) and negatives (label 0) are averaged separately and
    the two means summed; ``IGNORED`` tokens are dropped and an empty class
    set contributes 0.

    Args:
        confidences: Anomaly-class probabilities, numpy array or tensor.
        labels: Integer labels of the same shape in ``{0, 1, IGNORED}``.

    Returns:
        A float for numpy input, a scalar tensor for tensor input.
    """
    as_numpy = not isinstance(confidences, torch.Tensor)
    conf = torch.as_tensor(np.asarray(confidences, dtype=np.float64)) if as_numpy else confidences
    if bool(((conf < 0) | (conf > 1) | torch.isnan(conf)).any()):
        raise ValueError("confidences must lie in [0, 1]")
    lab = _as_label_array(labels, conf)
    loss = _focal_from_logs(torch.log(conf), torch.log1p(-conf), lab, alpha, gamma)
    return float(loss) if as_numpy else loss


def focal_loss_logits(logits, labels, alpha=0.25, gamma=4.0):
    """Same loss from two-class logits, computed through the logit margin."""
    z = logits[..., 1] - logits[..., 0]
    lab = _as_label_array(labels, z)
    return _focal_from_logs(F.logsigmoid(z), F.logsigmoid(-z), lab, alpha, gamma)


# ---------------------------------------------------------------- state


@dataclass
class TrainState:
    model: torch.nn.Module
    ema: torch.nn.Module
    optimizer: torch.optim.Optimizer
    step: int = 0


def init_state(cfg, dtype=torch.float32):
    model = build_model(cfg.model_config(), seed=cfg.seed, dtype=dtype)
    ema = copy.deepcopy(model)
    for p in ema.parameters():
        p.requires_grad_(False)
    opt = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=cfg.weight_decay
    )
    return TrainState(model, ema, opt)


def state_from_models(model, ema, cfg):
    opt = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=cfg.weight_decay
    )
    return TrainState(model, ema, opt)


def optimizer_step(state, grads, lr, weight_decay):
    """One AdamW update with decoupled decay applied before the moment step.

    ``grads`` maps parameter names to gradients (or is a sequence in
    parameter order).
    """
    named = list(state.model.named_parameters())
    if isinstance(grads, dict):
        missing = [n for n, _ in named if n not in grads]
        if missing:
            raise ValueError(f"gradients missing for {missing[:3]}")
        grads = [grads[n] for n, _ in named]
    grads = list(grads)
    if len(grads) != len(named):
        raise ValueError(f"got {len(grads)} gradients for {len(named)} parameters")
    for (name, p), g in zip(named, grads):
        g = torch.as_tensor(g, dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        if not bool(torch.isfinite(g).all()):
            raise TrainingError(f"non-finite gradient in {name}", state.step)
        p.grad = g.clone()
    for group in state.optimizer.param_groups:
        group["lr"] = lr
        group["weight_decay"] = weight_decay
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step += 1
    return state


def parameter_grads(model, loss):
    params = [p for p in model.parameters()]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g)
            for (n, p), g in zip(model.named_parameters(), grads)}


# ---------------------------------------------------------------- training data


@dataclass
class TrainingData:
    normal: list = field(default_factory=list)
    simulated: list = field(default_factory=list)
    real: list = field(default_factory=list)


def build_training_data(split, bank, cfg, real_labels=None):
    """Neighbor-difference caches and block labels for the three image pools.

    ``real_labels`` is ``"pixels"`` (supervised), ``"boxes"`` (semi-supervised)
    or ``None``; real defects are the first ``cfg.n_labeled`` defect images.
    """
    if not split.train_normal:
        raise ConfigError("training needs at least one normal image")
    h, w = split.train_normal[0].image.shape[:2]
    data = TrainingData()
    for item in split.train_normal:
        data.normal.append(prepare_image(bank, item.image, cfg, None, item.name, item.feature_path))
    h_f, w_f = data.normal[0].diffs.shape[:2]
    if h_f % cfg.rho or w_f % cfg.rho:
        raise ConfigError(f"feature grid {h_f}x{w_f} is not divisible by rho={cfg.rho}")
    h_t, w_t = h_f // cfg.rho, w_f // cfg.rho
    bext = block_extent((h, w), (h_t, w_t))
    for prepared in data.normal:
        prepared.labels = np.zeros((h_t, w_t), dtype=np.int64)

    seeds = np.random.SeedSequence([int(cfg.seed), SIMULATE]).generate_state(max(cfg.sim_pool, 1))
    for i in range(cfg.sim_pool if cfg.b2 else 0):
        base = split.train_normal[i % len(split.train_normal)]
        img, mask = synth_anomalies(base.image, int(seeds[i]))
        labels = blocks_from_pixels(mask, bext, cfg.eps_plus, cfg.eps_minus).map
        data.simulated.append(prepare_image(bank, img, cfg, labels, f"sim_{i:03d}"))

    if real_labels is not None:
        for item in split.labeled_defects(cfg.n_labeled):
            if real_labels == "pixels":
                labels = blocks_from_pixels(item.mask, bext, cfg.eps_plus, cfg.eps_minus).map
            elif real_labels == "boxes":
                if item.boxes is None:
                    raise ConfigError(f"{item.name}: no box file")
                labels = blocks_from_boxes(item.boxes, (h, w), bext, cfg.upsilon).map
            else:
                raise ValueError(f"unknown label source {real_labels!r}")
            data.real.append(prepare_image(bank, item.image, cfg, labels, item.name, item.feature_path))
    return data


@dataclass
class TrainingWindow:
    category: str
    image_index: int
    r_t: int
    c_t: int
    diffs: np.ndarray
    labels: np.ndarray


def windows_per_image(q, p):
    return max(1, int(math.floor(p * q + 0.5)))


def sample_training_windows(data, cfg, step_seed, categories=None):
    """Draw images per category and a fraction ``p`` of each image's windows.

    Images are drawn uniformly with replacement, ``b1``/``b2``/``b3`` per
    category; windows uniformly without replacement, at least one per image.
    """
    rng = np.random.default_rng(step_seed)
    if categories is None:
        categories = ("normal", "simulated") + (("real",) if cfg.setting != "unsupervised" else ())
    counts = {"normal": cfg.b1, "simulated": cfg.b2, "real": cfg.b3}
    rho = cfg.rho
    out = []
    for cat in categories:
        b = counts[cat]
        if b == 0:
            continue
        pool = getattr(data, cat)
        if not pool:
            raise ConfigError(f"no {cat} images available but b={b} requested")
        for idx in rng.integers(len(pool), size=b):
            item = pool[int(idx)]
            h_t, w_t = item.labels.shape
            wins = enumerate_windows(h_t, w_t, cfg.mu, cfg.step)
            keep = np.sort(rng.choice(len(wins), windows_per_image(len(wins), cfg.p), replace=False))
            for k in keep:
                w = wins[int(k)]
                fr, fc, fm = w.r_t * rho, w.c_t * rho, w.mu * rho
                out.append(TrainingWindow(
                    cat, int(idx), w.r_t, w.c_t,
                    item.diffs[fr:fr + fm, fc:fc + fm],
                    item.labels[w.r_t:w.r_t + w.mu, w.c_t:w.c_t + w.mu],
                ))
    return out


def window_tokens(windows, cfg, rng, augment=True):
    """Residual token windows, k-NN augmented when ``augment`` is set."""
    aug = cfg.augmentation()
    subs = []
    for win in windows:
        if augment and cfg.knn_augment:
            r = augment_residual_map(win.diffs, aug, rng, cfg.residual_mode)
        else:
            r = residual(win.diffs[:, :, 0], cfg.residual_mode).astype(np.float32)
        subs.append(tokenize(r, cfg.rho).tensor)
    return np.stack(subs)


def focal_batch_loss(model, windows, cfg, step):
    """Focal loss of one sampled batch; augmentation draws depend only on ``step``."""
    x = window_tokens(windows, cfg, stream(cfg.seed, step, AUGMENT))
    if cfg.dropout_focal:
        x = random_pcr_dropout(x, cfg.dropout_alpha, rng=stream(cfg.seed, step, DROPOUT))
    labels = np.stack([w.labels for w in windows])
    logits = model.logits(torch.as_tensor(x, dtype=model.dtype))
    return focal_loss_logits(logits, labels, cfg.focal_alpha, cfg.focal_gamma)


def _check_loss(loss, step):
    if not bool(torch.isfinite(loss)):
        raise TrainingError(f"loss became non-finite ({float(loss)})", step)


def train(data, cfg, state=None, on_step=None):
    """Focal-loss training over ``cfg.steps`` steps.

    Each step samples windows, augments them, runs forward/backward, applies
    AdamW and updates the EMA copy.

    Returns:
        ``(state, log)`` where ``log`` holds one ``(step, loss, lr, windows)``
        tuple per step; ``loss`` is measured before that step's update.
    """
    state = init_state(cfg) if state is None else state
    log = []
    for _ in range(cfg.steps):
        step = state.step
        windows = sample_training_windows(data, cfg, np.random.SeedSequence([cfg.seed, step, SAMPLE]))
        loss = focal_batch_loss(state.model, windows, cfg, step)
        _check_loss(loss, step)
        optimizer_step(state, parameter_grads(state.model, loss), cfg.lr, cfg.weight_decay)
        ema_update(state.ema.parameters(), state.model.parameters(), cfg.ema_decay)
        row = (step, float(loss.detach()), cfg.lr, len(windows))
        log.append(row)
        if on_step is not None:
            on_step(row)
        if step % 200 == 0:
            logger.debug("step {} loss {:.6f} windows {}", step, row[1], len(windows))
    return state, log


def replay_loss(model, data, cfg, step):
    """Loss of the focal batch drawn at ``step``, evaluated with ``model``."""
    windows = sample_training_windows(data, cfg, np.random.SeedSequence([cfg.seed, step, SAMPLE]))
    with torch.no_grad():
        return float(focal_batch_loss(model, windows, cfg, step))

