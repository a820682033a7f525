"""Tokenization, sliding windows, the windowed-attention classifier and bagging.

A residual map ``h_f x w_f x d_f`` is cut into ``rho x rho`` patches to form
the token tensor. Square windows of ``mu x mu`` tokens are classified token by
token by a small shifted-window transformer and the per-window anomaly
confidences are averaged over every window covering a location.
"""
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DataError, StateError


@dataclass
class TokenTensor:
    tensor: np.ndarray
    rho: int = 1

    @property
    def shape(self):
        return self.tensor.shape


@dataclass(frozen=True)
class WindowSpec:
    r_t: int
    c_t: int
    mu: int


def tokenize(pcr_map, rho=1):
    x = np.asarray(pcr_map)
    h, w, d = x.shape
    if h % rho or w % rho:
        raise ValueError(f"map extent {h}x{w} is not divisible by patch size {rho}")
    x = x.reshape(h // rho, rho, w // rho, rho, d).transpose(0, 2, 1, 3, 4)
    return TokenTensor(x.reshape(h // rho, w // rho, rho * rho * d).copy(), rho)


def detokenize(tokens):
    rho = tokens.rho
    h_t, w_t, d_t = tokens.tensor.shape
    d = d_t // (rho * rho)
    x = tokens.tensor.reshape(h_t, w_t, rho, rho, d).transpose(0, 2, 1, 3, 4)
    return x.reshape(h_t * rho, w_t * rho, d).copy()


def _offsets(extent, mu, s):
    offs = list(range(0, extent - mu + 1, s))
    if offs[-1] != extent - mu:
        offs.append(extent - mu)
    return offs


def enumerate_windows(h_t, w_t, mu, s):
    """All window placements, row-major, with the last offset clamped to the edge."""
    if mu < 1 or mu > h_t or mu > w_t:
        raise ValueError(f"window size {mu} does not fit a {h_t}x{w_t} token grid")
    if s < 1:
        raise ValueError("window step must be >= 1")
    return [WindowSpec(r, c, mu) for r in _offsets(h_t, mu, s) for c in _offsets(w_t, mu, s)]


def slice_window(tokens, w):
    t = tokens.tensor if isinstance(tokens, TokenTensor) else np.asarray(tokens)
    h_t, w_t = t.shape[:2]
    if w.r_t < 0 or w.c_t < 0 or w.r_t + w.mu > h_t or w.c_t + w.mu > w_t:
        raise ValueError(f"window {w} exceeds token grid {h_t}x{w_t}")
    return t[w.r_t:w.r_t + w.mu, w.c_t:w.c_t + w.mu].copy()


@dataclass
class ModelConfig:
    d_t: int = 64
    embed_dim: int = 64
    depth: int = 4
    attn_window: int = 8
    heads: int = 32
    mlp_hidden: int = 256
    mu: int = 32
    step: int = 8
    rho: int = 1

    @property
    def effective_window(self):
        return min(self.attn_window, self.mu)

    def hparams(self):
        return list(asdict(self).values())

    @classmethod
    def from_hparams(cls, values):
        return cls(*values)


def _window_partition(x, ws):
    b, h, w, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, ws * ws, c)


def _window_reverse(windows, ws, b, h, w):
    c = windows.shape[-1]
    x = windows.view(b, h // ws, w // ws, ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


class WindowAttention(nn.Module):
    def __init__(self, dim, window, heads):
        super().__init__()
        if dim % heads:
            raise ValueError(f"embedding width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij"))
        coords = coords.flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (window - 1)
        self.register_buffer("rel_index", rel[..., 0] * (2 * window - 1) + rel[..., 1], persistent=False)

    def forward(self, x, mask=None):
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.rel_bias[self.rel_index.reshape(-1)].reshape(n, n, self.heads).permute(2, 0, 1)
        attn = attn + bias[None]
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.heads, n, n) + mask[None, :, None]
            attn = attn.view(bw, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


class SwinBlock(nn.Module):
    def __init__(self, dim, resolution, window, heads, mlp_hidden, shift):
        super().__init__()
        self.window = window
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_hidden)
        self.fc2 = nn.Linear(mlp_hidden, dim)
        mask = None
        if shift:
            region = torch.zeros(1, resolution, resolution, 1)
            cuts = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
            label = 0
            for rs in cuts:
                for cs in cuts:
                    region[:, rs, cs, :] = label
                    label += 1
            ids = _window_partition(region, window).squeeze(-1)
            diff = ids[:, None, :] - ids[:, :, None]
            mask = torch.zeros_like(diff).masked_fill(diff != 0, -100.0)
        self.register_buffer("mask", mask, persistent=False)

    def forward(self, x):
        b, h, w, c = x.shape
        y = self.norm1(x)
        if self.shift:
            y = torch.roll(y, shifts=(-self.shift, -self.shift), dims=(1, 2))
        y = _window_partition(y, self.window)
        mask = self.mask.to(y.dtype) if self.mask is not None else None
        y = _window_reverse(self.attn(y, mask), self.window, b, h, w)
        if self.shift:
            y = torch.roll(y, shifts=(self.shift, self.shift), dims=(1, 2))
        x = x + y
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class SwinClassifier(nn.Module):
    """Per-token two-class classifier over a ``mu x mu x d_t`` window.

    Blocks alternate plain and shifted attention windows (shift of half a
    window on every second block); no patch merging, so the output keeps the
    input resolution.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        ws = config.effective_window
        if config.mu % ws:
            raise ValueError(f"window size {config.mu} is not divisible by attention window {ws}")
        self.embed = nn.Linear(config.d_t, config.embed_dim)
        blocks = []
        for i in range(config.depth):
            shift = ws // 2 if (i % 2 == 1 and ws < config.mu) else 0
            blocks.append(SwinBlock(config.embed_dim, config.mu, ws, config.heads, config.mlp_hidden, shift))
        self.blocks = nn.ModuleList(blocks)
        self.norm = nn.LayerNorm(config.embed_dim)
        self.head = nn.Linear(config.embed_dim, 2)
        self._last_output = None

    def reset_parameters(self, seed):
        gen = torch.Generator().manual_seed(int(seed))
        for name, p in self.named_parameters():
            with torch.no_grad():
                if name.endswith("rel_bias") or (p.ndim == 2 and "norm" not in name):
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype).clamp_(-2, 2) * 0.02)
                elif "norm" in name and name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()
        return self

    def logits(self, x):
        if x.ndim == 3:
            x = x[None]
        mu, d_t = self.config.mu, self.config.d_t
        if tuple(x.shape[1:]) != (mu, mu, d_t):
            raise ValueError(f"expected windows of shape {(mu, mu, d_t)}, got {tuple(x.shape[1:])}")
        h = self.embed(x)
        for blk in self.blocks:
            h = blk(h)
        return self.head(self.norm(h))

    def forward(self, x):
        return self.logits(x).softmax(dim=-1)

    def train_forward(self, x):
        """Forward with graph retained; returns the anomaly-confidence map."""
        x = torch.as_tensor(x, dtype=self.dtype)
        out = self.forward(x)[..., 1]
        self._last_output = out
        return out

    def backward(self, upstream):
        """Parameter gradients of ``sum(upstream * last_output)``.

        Parameters with ``requires_grad`` disabled get zero gradients.
        """
        if self._last_output is None:
            raise StateError("backward called without a preceding train_forward")
        out, self._last_output = self._last_output, None
        upstream = torch.as_tensor(upstream, dtype=out.dtype).reshape(out.shape)
        params = [p for p in self.parameters() if p.requires_grad]
        grads = torch.autograd.grad(out, params, upstream, allow_unused=True)
        by_param = {id(p): g for p, g in zip(params, grads)}
        result = {}
        for name, p in self.named_parameters():
            g = by_param.get(id(p))
            result[name] = torch.zeros_like(p) if g is None else g
        return result

    @property
    def dtype(self):
        return self.embed.weight.dtype


def build_model(config, seed=0, dtype=torch.float32):
    return SwinClassifier(config).reset_parameters(seed).to(dtype)


def forward(model, sub):
    """Anomaly-class confidence for one window (or a batch) as a numpy array."""
    x = torch.as_tensor(np.asarray(sub), dtype=model.dtype)
    with torch.no_grad():
        out = model(x)[..., 1]
    out = out.numpy()
    return out[0] if np.asarray(sub).ndim == 3 else out


def bag_predict(model, tokens, mu=None, s=None, batch=64):
    """Average the per-window confidences over all covering windows."""
    mu = model.config.mu if mu is None else mu
    s = model.config.step if s is None else s
    t = tokens.tensor if isinstance(tokens, TokenTensor) else np.asarray(tokens)
    h_t, w_t = t.shape[:2]
    windows = enumerate_windows(h_t, w_t, mu, s)
    total = np.zeros((h_t, w_t), dtype=np.float64)
    count = np.zeros((h_t, w_t), dtype=np.int64)
    for start in range(0, len(windows), batch):
        chunk = windows[start:start + batch]
        subs = np.stack([slice_window(t, w) for w in chunk])
        preds = forward(model, subs).astype(np.float64)
        for w, p in zip(chunk, preds):
            total[w.r_t:w.r_t + mu, w.c_t:w.c_t + mu] += p
            count[w.r_t:w.r_t + mu, w.c_t:w.c_t + mu] += 1
    return total / count


def ema_update(ema_params, live_params, decay):
    """In-place ``ema <- decay * ema + (1 - decay) * live`` over parallel sequences."""
    if not 0 <= decay <= 1:
        raise ValueError(f"decay must lie in [0, 1], got {decay}")
    ema_params = list(ema_params)
    live_params = list(live_params)
    if len(ema_params) != len(live_params):
        raise ValueError("EMA and live parameter lists differ in length")
    for e, p in zip(ema_params, live_params):
        if e.shape != p.shape:
            raise ValueError(f"parameter shape mismatch {tuple(e.shape)} vs {tuple(p.shape)}")
        if isinstance(e, torch.Tensor):
            with torch.no_grad():
                e.mul_(decay).add_(p.detach(), alpha=1.0 - decay)
        else:
            e *= decay
            e += (1.0 - decay) * p
    return ema_params


def parameter_layout(model):
    return [(name, tuple(p.shape)) for name, p in model.named_parameters()]


def flat_parameters(model):
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


def load_flat_parameters(model, flat):
    flat = torch.as_tensor(flat)
    pos = 0
    with torch.no_grad():
        for p in model.parameters():
            n = p.numel()
            p.copy_(flat[pos:pos + n].reshape(p.shape))
            pos += n
    if pos != flat.numel():
        raise ValueError(f"flat vector has {flat.numel()} values, layout needs {pos}")


def save_checkpoint(path, live, ema):
    """Write live and EMA parameters into one ``SRMD`` container."""
    from . import containers

    sections = {}
    for prefix, model in (("live", live), ("ema", ema)):
        for name, p in model.named_parameters():
            sections[f"{prefix}.{name}"] = p.detach().cpu().numpy()
    with open(path, "wb") as fh:
        fh.write(containers.encode_model(live.config.hparams(), sections))


def load_checkpoint(path, dtype=torch.float32):
    """Read an ``SRMD`` checkpoint; returns ``(live_model, ema_model)``."""
    from . import containers

    with open(path, "rb") as fh:
        hparams, sections = containers.decode_model(fh.read())
    config = ModelConfig.from_hparams(hparams)
    models = []
    for prefix in ("live", "ema"):
        model = SwinClassifier(config).to(dtype)
        with torch.no_grad():
            for name, p in model.named_parameters():
                key = f"{prefix}.{name}"
                if key not in sections:
                    raise DataError(f"checkpoint {path} has no section {key!r}")
                p.copy_(torch.as_tensor(sections[key]))
        models.append(model)
    models[1].requires_grad_(False)
    return models[0], models[1]
