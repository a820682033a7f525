"""Pixel-level localization metrics: AP, PRO and pixel-AUROC.

All metrics pool pixels across the given images.
"""
import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from sklearn.metrics import average_precision_score, roc_auc_score

from .errors import UndefinedMetricError
from .numeric import bilinear_resize, gaussian_blur


def postprocess_map(theta, image_extent, sigma=4.0):
    """Bilinear upscale of a block map to the image extent, then Gaussian smoothing."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    up = bilinear_resize(np.asarray(theta, dtype=np.float64), *image_extent)
    return gaussian_blur(up, sigma)


def _pool(scores, truths):
    scores = [np.asarray(s, dtype=np.float64) for s in _as_list(scores)]
    truths = [np.asarray(t) for t in _as_list(truths)]
    if len(scores) != len(truths):
        raise ValueError(f"{len(scores)} score maps but {len(truths)} truth maps")
    for s, t in zip(scores, truths):
        if s.shape != t.shape:
            raise ValueError(f"score map {s.shape} and truth map {t.shape} differ in shape")
    s = np.concatenate([x.ravel() for x in scores])
    t = np.concatenate([(x > 0).ravel() for x in truths]).astype(np.int64)
    if not np.all(np.isfinite(s)):
        raise ValueError("score maps must be finite")
    return s, t


def _as_list(maps):
    if isinstance(maps, np.ndarray) and maps.ndim == 2:
        return [maps]
    return list(maps)


def pixel_auroc(scores, truths):
    """ROC area over pooled pixels; tied scores count half (midrank)."""
    s, t = _pool(scores, truths)
    if t.min() == t.max():
        raise UndefinedMetricError("pixel AUROC needs both anomalous and normal pixels")
    return float(roc_auc_score(t, s))


def average_precision(scores, truths):
    """Step-wise area under the precision-recall curve over pooled pixels."""
    s, t = _pool(scores, truths)
    if t.sum() == 0:
        raise UndefinedMetricError("average precision needs at least one anomalous pixel")
    return float(average_precision_score(t, s))


def _region_weights(truths):
    # weight 1/(|region| * n_regions) for every pixel of every 8-connected region
    weights = []
    n_regions = 0
    sizes = []
    labeled = []
    for t in _as_list(truths):
        lab, n = ndimage.label(np.asarray(t) > 0, structure=np.ones((3, 3), dtype=int))
        labeled.append((lab, n_regions))
        if n:
            sizes.append(np.bincount(lab.ravel())[1:])
        n_regions += n
    if n_regions == 0:
        raise UndefinedMetricError("PRO needs at least one anomaly region")
    size_all = np.concatenate(sizes)
    for lab, offset in labeled:
        w = np.zeros(lab.shape)
        inside = lab > 0
        w[inside] = 1.0 / (size_all[lab[inside] - 1 + offset] * n_regions)
        weights.append(w.ravel())
    return np.concatenate(weights)


def pro_curve(scores, truths):
    """Exact (FPR, mean region overlap) points, one per distinct score, from (0, 0)."""
    s, t = _pool(scores, truths)
    n_neg = int((t == 0).sum())
    if n_neg == 0:
        raise UndefinedMetricError("PRO needs normal pixels to measure false positives")
    w = _region_weights(truths)
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    fp = np.cumsum((t[order] == 0).astype(np.float64)) / n_neg
    overlap = np.cumsum(w[order])
    # keep the last index of every run of equal scores
    ends = np.flatnonzero(np.diff(s_sorted) != 0)
    ends = np.append(ends, len(s_sorted) - 1)
    fpr = np.concatenate([[0.0], fp[ends]])
    pro = np.concatenate([[0.0], overlap[ends]])
    return fpr, pro


def integrate_to(x, y, limit):
    """Trapezoid area under the piecewise-linear curve ``(x, y)`` on ``[0, limit]``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    keep = x <= limit
    xs, ys = x[keep], y[keep]
    if xs[-1] < limit and keep.sum() < len(x):
        j = int(np.argmax(~keep))
        x0, x1, y0, y1 = x[j - 1], x[j], y[j - 1], y[j]
        y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        xs = np.append(xs, limit)
        ys = np.append(ys, y_lim)
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))


def pro_score(scores, truths, fpr_limit=0.3):
    """Normalized area under the per-region-overlap curve up to ``fpr_limit``."""
    if not 0 < fpr_limit <= 1:
        raise ValueError(f"fpr_limit must lie in (0, 1], got {fpr_limit}")
    fpr, pro = pro_curve(scores, truths)
    return integrate_to(fpr, pro, fpr_limit) / fpr_limit


@dataclass
class MetricReport:
    ap: float
    pro: float
    pixel_auroc: float
    per_image: list = field(default_factory=list)
    degenerate: bool = False
    category: str = "all"


def _maybe(fn, s, t):
    try:
        return fn(s, t)
    except UndefinedMetricError:
        return float("nan")


def evaluate(scores, truths, names=None, fpr_limit=0.3, category="all"):
    """All three metrics plus a per-image breakdown.

    Constant score maps make AP and PRO meaningless; the report is then
    marked ``degenerate``.
    """
    scores = _as_list(scores)
    truths = _as_list(truths)
    s, _ = _pool(scores, truths)
    names = names or [f"image_{i:03d}" for i in range(len(scores))]
    per_image = [
        (n, _maybe(pixel_auroc, sc, tr), _maybe(average_precision, sc, tr))
        for n, sc, tr in zip(names, scores, truths)
    ]
    return MetricReport(
        average_precision(scores, truths),
        pro_score(scores, truths, fpr_limit),
        pixel_auroc(scores, truths),
        per_image,
        degenerate=bool(s.min() == s.max()),
        category=category,
    )


def _fmt(v):
    return "nan" if v != v else repr(float(v))


def write_report(path, reports, per_image=False):
    """CSV with ``category,ap,pro,pixel_auroc`` rows and a ``mean`` row.

    Degenerate reports print ``degenerate`` in place of AP and PRO.
    """
    reports = list(reports)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["category", "ap", "pro", "pixel_auroc"])
        for r in reports:
            if r.degenerate:
                out.writerow([r.category, "degenerate", "degenerate", _fmt(r.pixel_auroc)])
            else:
                out.writerow([r.category, _fmt(r.ap), _fmt(r.pro), _fmt(r.pixel_auroc)])
        if len(reports) > 1:
            ok = [r for r in reports if not r.degenerate]
            mean = lambda key, rs: _fmt(np.mean([getattr(r, key) for r in rs])) if rs else "nan"
            out.writerow(["mean", mean("ap", ok), mean("pro", ok), mean("pixel_auroc", reports)])
        if per_image:
            out.writerow(["image", "ap", "", "pixel_auroc"])
            for r in reports:
                for name, auc, ap in r.per_image:
                    out.writerow([f"{r.category}/{name}", _fmt(ap), "", _fmt(auc)])
