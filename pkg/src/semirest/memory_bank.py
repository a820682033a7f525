"""Coreset memory bank of normal PCFs and exact nearest-neighbor residuals."""
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import containers
from .numeric import elementwise_abs, elementwise_square

RESIDUAL_MODES = {"square": elementwise_square, "abs": elementwise_abs}


@dataclass(frozen=True)
class MemoryBank:
    entries: np.ndarray
    subsample_ratio: float = 1.0
    build_seed: int = 0
    # positions of the entries in the input feature list, in selection order
    indices: np.ndarray = field(default=None, compare=False)

    def __post_init__(self):
        if self.entries.ndim != 2 or self.entries.shape[0] < 1:
            raise ValueError("a memory bank needs at least one entry of shape (T, d)")

    def __len__(self):
        return self.entries.shape[0]

    @property
    def dim(self):
        return self.entries.shape[1]


@dataclass
class Pcr:
    vector: np.ndarray
    query_position: tuple = None


def coreset_size(n, ratio):
    return max(1, int(math.floor(ratio * n + 0.5)))


def coreset_subsample(features, ratio, seed=0):
    """Greedy k-center selection over ``features`` (N x d).

    The first entry is drawn uniformly from ``seed``; every further entry is
    the point farthest from the current selection, lowest index on ties.
    """
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("coreset_subsample needs a non-empty (N, d) feature array")
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    n = features.shape[0]
    m = coreset_size(n, ratio)
    work = features.astype(np.float64)

    rng = np.random.default_rng(seed)
    first = int(rng.integers(n))
    selected = [first]
    diff = work - work[first]
    min_d2 = np.einsum("ij,ij->i", diff, diff)
    for _ in range(m - 1):
        nxt = int(np.argmax(min_d2))
        selected.append(nxt)
        diff = work - work[nxt]
        np.minimum(min_d2, np.einsum("ij,ij->i", diff, diff), out=min_d2)

    idx = np.asarray(selected, dtype=np.int64)
    return MemoryBank(features[idx].astype(np.float32), float(ratio), int(seed), idx)


def knn_search(bank, queries, k, chunk=256):
    """Exact k-NN for a batch of queries.

    Returns ``(indices, distances)`` of shape ``(Q, k)`` sorted ascending by
    distance with ties resolved toward the lower entry index.
    """
    entries = bank.entries.astype(np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim == 1:
        queries = queries[None]
    if queries.shape[1] != entries.shape[1]:
        raise ValueError(f"query dimension {queries.shape[1]} != bank dimension {entries.shape[1]}")
    t = entries.shape[0]
    if not 1 <= k <= t:
        raise ValueError(f"k={k} must lie in [1, {t}]")
    out_idx = np.empty((queries.shape[0], k), dtype=np.int64)
    out_dist = np.empty((queries.shape[0], k))
    for start in range(0, queries.shape[0], chunk):
        q = queries[start:start + chunk]
        diff = q[:, None, :] - entries[None, :, :]
        d2 = np.einsum("qtd,qtd->qt", diff, diff)
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        out_idx[start:start + chunk] = order
        out_dist[start:start + chunk] = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return out_idx, out_dist


def nearest_neighbors(bank, query, k):
    """The ``k`` closest bank entries as a list of ``(entry_index, distance)``."""
    idx, dist = knn_search(bank, np.asarray(query)[None], k)
    return [(int(i), float(d)) for i, d in zip(idx[0], dist[0])]


def residual(diff, mode="square"):
    try:
        return RESIDUAL_MODES[mode](diff)
    except KeyError:
        raise ValueError(f"unknown residual mode {mode!r}") from None


def compute_pcr(bank, query, mode="square", position=None):
    query = np.asarray(query)
    (j, _), = nearest_neighbors(bank, query, 1)
    diff = query.astype(np.float64) - bank.entries[j].astype(np.float64)
    return Pcr(residual(diff, mode).astype(np.float32), position)


def pcr_map(bank, pcf, mode="square"):
    """Residual tensor ``h x w x d`` for a whole PCF map."""
    t = np.asarray(pcf)
    h, w, d = t.shape
    flat = t.reshape(-1, d)
    idx, _ = knn_search(bank, flat, 1)
    diff = flat.astype(np.float64) - bank.entries[idx[:, 0]].astype(np.float64)
    return residual(diff, mode).reshape(h, w, d).astype(np.float32)


def write_bank(bank, path):
    Path(path).write_bytes(containers.encode_bank(bank.entries, bank.build_seed, bank.subsample_ratio))


def read_bank(path):
    entries, seed, ratio = containers.decode_bank(Path(path).read_bytes())
    return MemoryBank(entries, float(ratio), int(seed))
