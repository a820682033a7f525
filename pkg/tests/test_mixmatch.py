import math

import numpy as np
import pytest
import torch

from semirest.config import MixMatchConfig, TrainConfig
from semirest.errors import ConfigError
from semirest.mixmatch import (
    SemiBatch, finetune_semi, guess_labels, mixmatch_step, mixup_pair, ramp_weight, sharpen,
)
from semirest.training import focal_loss_logits, init_state
from semirest.transformer import build_model, forward

from oracles import algorithm1_loss

D = 8


def _cfg(**mm):
    return TrainConfig(setting="semi", d_f=D, embed_dim=8, heads=2, depth=2, mlp_hidden=16,
                       mixmatch=MixMatchConfig(**mm))


def _batch(seed, n=2, unknown=True):
    rng = np.random.default_rng(seed)
    diffs = (rng.normal(size=(n, 4, 4, 3, D)) * 0.5).astype(np.float32)
    labels = np.zeros((n, 4, 4), dtype=np.int64)
    if unknown:
        labels[:, 1:3, 1:4] = -1
    return SemiBatch(diffs, labels)


def test_sharpen_examples():
    assert sharpen(0.8, 0.5) == pytest.approx(0.64 / 0.68, abs=1e-12)
    assert round(sharpen(0.8, 0.5), 4) == 0.9412
    assert sharpen(0.5, 0.25) == 0.5
    assert sharpen(0.3, 1.0) == pytest.approx(0.3)
    np.testing.assert_allclose(sharpen(np.array([0.0, 1.0]), 0.5), [0.0, 1.0])
    with pytest.raises(ValueError):
        sharpen(0.5, 0.0)
    with pytest.raises(ValueError):
        sharpen(1.5, 0.5)


def test_sharpen_is_symmetric_and_monotone():
    p = np.linspace(0.01, 0.99, 50)
    s = sharpen(p, 0.5)
    np.testing.assert_allclose(s + sharpen(1 - p, 0.5), 1.0, atol=1e-12)
    assert np.all(np.diff(s) > 0)


def test_ramp_examples():
    assert ramp_weight(0, 5, 400) == 0
    assert ramp_weight(200, 5, 400) == 2.5
    assert ramp_weight(400, 5, 400) == 5
    assert ramp_weight(10_000, 5, 400) == 5
    assert ramp_weight(3, 5, 0) == 5


def test_mixup_examples():
    tok, lab = mixup_pair((np.array([1.0, 0.0]), 0.0), (np.array([0.0, 1.0]), 1.0), 0.75, lam=0.75)
    np.testing.assert_allclose(tok, [0.75, 0.25])
    assert lab == 0.25
    for seed in range(20):
        tok, _ = mixup_pair((np.ones(1), 0.0), (np.zeros(1), 1.0), 0.75, seed=seed)
        assert tok[0] >= 0.5  # the first argument always dominates


def test_guess_labels_average_then_sharpen():
    model = build_model(_cfg().model_config(), seed=0, dtype=torch.float64)
    copies = np.random.default_rng(0).normal(size=(3, 2, 4, 4, D))
    conf = np.stack([forward(model, c) for c in copies])
    np.testing.assert_allclose(guess_labels(model, copies, 0.5), sharpen(conf.mean(0), 0.5), atol=1e-12)


def test_semi_batch_rejects_positive_labels():
    with pytest.raises(ValueError):
        SemiBatch(np.zeros((1, 4, 4, 3, D), np.float32), np.ones((1, 4, 4)))


@pytest.mark.parametrize("seed", range(3))
def test_degenerates_to_focal_loss(seed):
    cfg = _cfg(gamma=1.0, M=1)
    cfg.dropout_alpha = 0.0
    model = build_model(cfg.model_config(), seed=seed, dtype=torch.float64)
    batch = _batch(seed, unknown=False)
    out = mixmatch_step(model, batch, cfg, step=7, rng=np.random.default_rng(seed), lam=1.0)
    logits = model.logits(torch.as_tensor(out.copies[0], dtype=torch.float64))
    want = focal_loss_logits(logits, batch.labels, cfg.mixmatch.alpha_x, cfg.mixmatch.gamma_x)
    assert out.l_u.item() == 0.0
    assert out.loss.item() == pytest.approx(want.item(), abs=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_matches_straight_line_oracle(seed):
    cfg = _cfg()
    model = build_model(cfg.model_config(), seed=seed, dtype=torch.float64)
    batch = _batch(seed)
    out = mixmatch_step(model, batch, cfg, step=150, rng=np.random.default_rng(seed))
    loss, l_x, l_u = algorithm1_loss(lambda x: forward(model, x), batch.diffs, batch.labels, cfg, 150, seed)
    assert out.l_x.item() == pytest.approx(l_x, abs=1e-6)
    assert out.l_u.item() == pytest.approx(l_u, abs=1e-6)
    assert out.loss.item() == pytest.approx(loss, abs=1e-6)


def test_forced_unit_weight_leaves_tokens_in_place():
    cfg = _cfg()
    cfg.dropout_alpha = 0.0
    model = build_model(cfg.model_config(), seed=0, dtype=torch.float64)
    out = mixmatch_step(model, _batch(0), cfg, step=0, rng=np.random.default_rng(0), lam=1.0)
    np.testing.assert_array_equal(out.mixed_tokens, out.copies.astype(np.float64))
    want = np.where(out.y_star == 0, 0.0, np.broadcast_to(out.guess, out.y_star.shape))
    np.testing.assert_array_equal(out.mixed_labels, want)


def test_labels_and_provenance():
    cfg = _cfg()
    model = build_model(cfg.model_config(), seed=1, dtype=torch.float64)
    batch = _batch(1)
    out = mixmatch_step(model, batch, cfg, step=0, rng=np.random.default_rng(1))
    assert out.copies.shape == (3, 2, 4, 4, D)
    np.testing.assert_array_equal(out.y_star, np.broadcast_to(batch.labels, (3, 2, 4, 4)))
    assert np.all((out.mixed_labels >= 0) & (out.mixed_labels <= 1))
    assert out.weight == 0.0
    np.testing.assert_allclose(out.loss.item(), out.l_x.item())


def test_window_scope_mixes_within_windows():
    cfg = _cfg(mix_scope="window")
    cfg.dropout_alpha = 0.0
    model = build_model(cfg.model_config(), seed=2, dtype=torch.float64)
    batch = _batch(2)
    batch.diffs[1] += 100.0  # make window 1 tokens far from window 0 tokens
    out = mixmatch_step(model, batch, cfg, step=0, rng=np.random.default_rng(2))
    assert out.mixed_tokens[:, 0].max() < 50 and out.mixed_tokens[:, 1].min() > 50


def test_mixmatch_gradients_flow():
    cfg = _cfg()
    model = build_model(cfg.model_config(), seed=0, dtype=torch.float64)
    out = mixmatch_step(model, _batch(3), cfg, step=500, rng=np.random.default_rng(3))
    out.loss.backward()
    assert model.head.weight.grad.abs().sum() > 0


def test_finetune_requires_real_windows(tiny_setup):
    cfg, _, data = tiny_setup
    state = init_state(cfg)
    with pytest.raises(ConfigError):
        finetune_semi(data, state, cfg.for_setting("semi", b3=0))


def test_finetune_runs_and_is_deterministic(tiny_setup):
    cfg, _, data = tiny_setup
    cfg = cfg.for_setting("semi", steps=2)
    runs = []
    for _ in range(2):
        state, log = finetune_semi(data, init_state(cfg), cfg)
        assert len(log) == 2 and state.step == 2 and all(math.isfinite(r[1]) for r in log)
        runs.append(torch.cat([p.detach().reshape(-1) for p in state.model.parameters()]))
    torch.testing.assert_close(runs[0], runs[1], rtol=0, atol=0)
