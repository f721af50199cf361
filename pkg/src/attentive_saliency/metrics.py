"""Saliency metrics and the composite training loss.

Prediction and groundtruth maps are 2-D arrays (a leading singleton channel
axis is accepted and dropped).  Standard deviations are population ones.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .transport import min_cost_transport

KL_EPS = 1e-7
EMD_MAX_CELLS = 4096
METRIC_NAMES = ("nss", "cc", "kl", "auc_judd", "sauc", "sim", "emd")


class DegenerateInputError(ValueError):
    """Raised when a metric is undefined for its input (constant map, no fixations...)."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = -1.0
    beta: float = -2.0
    gamma: float = 10.0

    def as_tuple(self):
        return (self.alpha, self.beta, self.gamma)


def as_map(x, name: str = "map") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"{name} must be a non-empty H x W grid, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def as_fixations(x, name: str = "fixations") -> np.ndarray:
    return as_map(x, name) > 0


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def standardize(x) -> np.ndarray:
    x = as_map(x)
    sd = x.std()
    if sd == 0:
        raise DegenerateInputError("map has zero variance")
    return (x - x.mean()) / sd


def normalize(x, name: str = "map") -> np.ndarray:
    x = as_map(x, name)
    s = x.sum()
    if s <= 0 or np.any(x < 0):
        raise DegenerateInputError(f"{name} must be non-negative with positive sum")
    return x / s


def nss(pred, fix) -> float:
    pred, fix = as_map(pred, "pred"), as_fixations(fix)
    _check_same(pred, fix)
    if not fix.any():
        raise DegenerateInputError("no fixations")
    return float(standardize(pred)[fix].mean())


def cc(pred, gt) -> float:
    a, b = as_map(pred, "pred"), as_map(gt, "gt")
    _check_same(a, b)
    return float(np.mean(standardize(a) * standardize(b)))


def kl_div(pred, gt, eps: float = KL_EPS) -> float:
    """sum gt * log(gt / (pred + eps) + eps), both operands normalized first."""
    p, q = normalize(pred, "pred"), normalize(gt, "gt")
    _check_same(p, q)
    return float(np.sum(q * np.log(q / (p + eps) + eps)))


def combined_loss(pred, gt_den, gt_fix, w: LossWeights = LossWeights()) -> float:
    out = 0.0
    # skip zero-weighted terms so e.g. a KL-only loss accepts a constant map
    if w.alpha:
        out += w.alpha * nss(pred, gt_fix)
    if w.beta:
        out += w.beta * cc(pred, gt_den)
    if w.gamma:
        out += w.gamma * kl_div(pred, gt_den)
    return float(out)


def auc_from_scores(pos, neg) -> float:
    """Threshold AUC with thresholds at the distinct positive scores.

    At threshold t a score s counts as positive when s >= t.  The ROC points
    are joined by straight lines, with (0, 0) and (1, 1) as end points.  The
    trapezoid sum is accumulated as an integer and divided once.
    """
    pos = np.sort(np.asarray(pos, dtype=np.float64).ravel())
    neg = np.sort(np.asarray(neg, dtype=np.float64).ravel())
    n_pos, n_neg = pos.size, neg.size
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("AUC needs at least one positive and one negative")
    thresholds = np.unique(pos)[::-1]
    tp = n_pos - np.searchsorted(pos, thresholds, side="left")
    fp = n_neg - np.searchsorted(neg, thresholds, side="left")
    a = [0] + [int(v) for v in tp] + [n_pos]
    b = [0] + [int(v) for v in fp] + [n_neg]
    num = sum((b[k] - b[k - 1]) * (a[k] + a[k - 1]) for k in range(1, len(a)))
    return num / (2 * n_pos * n_neg)


def auc_judd(pred, fix) -> float:
    pred, fix = as_map(pred, "pred"), as_fixations(fix)
    _check_same(pred, fix)
    if not fix.any():
        raise DegenerateInputError("no fixations")
    if fix.all():
        raise DegenerateInputError("every cell is fixated")
    return auc_from_scores(pred[fix], pred[~fix])


def shuffled_negatives(fix, others: Sequence, seed: int) -> np.ndarray:
    """Flat indices of the negative cells drawn for sAUC.

    The pool is the union of the other maps' fixated cells minus this map's
    own fixations; as many cells as there are fixations are drawn uniformly
    with replacement.
    """
    fix = as_fixations(fix)
    pool = np.zeros(fix.shape, dtype=bool)
    for k, o in enumerate(others):
        o = as_fixations(o, f"negative map {k}")
        _check_same(fix, o)
        pool |= o
    pool &= ~fix
    idx = np.flatnonzero(pool)
    if idx.size == 0:
        raise DegenerateInputError("empty negative pool after excluding own fixations")
    rng = np.random.default_rng(seed)
    return rng.choice(idx, size=int(fix.sum()), replace=True)


def sauc(pred, fix, shuffle_negatives: Sequence, seed: int = 0) -> float:
    pred, fixb = as_map(pred, "pred"), as_fixations(fix)
    _check_same(pred, fixb)
    if not fixb.any():
        raise DegenerateInputError("no fixations")
    neg = shuffled_negatives(fixb, shuffle_negatives, seed)
    return auc_from_scores(pred[fixb], pred.ravel()[neg])


def sim(pred, gt) -> float:
    p, q = normalize(pred, "pred"), normalize(gt, "gt")
    _check_same(p, q)
    return float(np.minimum(p, q).sum())


def block_sum(x, factor: int) -> np.ndarray:
    """Sum non-overlapping factor x factor blocks, zero-padding the ragged edge."""
    h, w = x.shape
    hb, wb = -(-h // factor), -(-w // factor)
    padded = np.zeros((hb * factor, wb * factor))
    padded[:h, :w] = x
    return padded.reshape(hb, factor, wb, factor).sum(axis=(1, 3))


def emd_factor(shape, max_cells: int) -> int:
    """Smallest block size bringing the grid within ``max_cells`` cells."""
    if max_cells < 1:
        raise ValueError("max_cells must be positive")
    h, w = shape
    f = 1
    while -(-h // f) * -(-w // f) > max_cells:
        f += 1
    return f


def emd_with_info(pred, gt, max_cells: int = EMD_MAX_CELLS):
    """Return ``(emd, factor)``; factor > 1 means the maps were block-summed."""
    p, q = normalize(pred, "pred"), normalize(gt, "gt")
    _check_same(p, q)
    f = emd_factor(p.shape, max_cells)
    if f > 1:
        p, q = block_sum(p, f), block_sum(q, f)
    # mass present in both maps stays put at zero cost (the ground distance
    # is a metric), so only the surplus has to travel
    shared = np.minimum(p, q)
    src, dst = (p - shared).ravel(), (q - shared).ravel()
    si, di = np.flatnonzero(src > 0), np.flatnonzero(dst > 0)
    if si.size == 0 or di.size == 0:
        return 0.0, f
    w = p.shape[1]
    ys, xs = np.divmod(si, w)
    yd, xd = np.divmod(di, w)
    cost = np.hypot(ys[:, None] - yd[None, :], xs[:, None] - xd[None, :]) * f
    value, _ = min_cost_transport(src[si], dst[di], cost)
    return value, f


def emd(pred, gt, max_cells: int = EMD_MAX_CELLS) -> float:
    return emd_with_info(pred, gt, max_cells)[0]


# -- reports ------------------------------------------------------------------

@dataclass
class MetricReport:
    metrics: tuple
    image_ids: list = field(default_factory=list)
    rows: list = field(default_factory=list)       # one {metric: value} per image
    meta: dict = field(default_factory=dict)

    def add(self, image_id: str, values: Mapping[str, float]):
        missing = set(self.metrics) - set(values)
        if missing:
            raise ValueError(f"image {image_id} lacks metrics {sorted(missing)}")
        self.image_ids.append(str(image_id))
        self.rows.append({m: float(values[m]) for m in self.metrics})

    def mean(self) -> dict:
        if not self.rows:
            return {m: float("nan") for m in self.metrics}
        return {m: float(np.mean([r[m] for r in self.rows])) for m in self.metrics}

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["image_id", *self.metrics])
        for iid, row in zip(self.image_ids, self.rows):
            wr.writerow([iid, *(repr(row[m]) for m in self.metrics)])
        mean = self.mean()
        wr.writerow(["MEAN", *(repr(mean[m]) for m in self.metrics)])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "metrics": list(self.metrics),
            "images": [{"image_id": i, **r} for i, r in zip(self.image_ids, self.rows)],
            "mean": self.mean(),
            "meta": self.meta,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _evaluate_one(args):
    k, pred, den, fix, metrics, others, seed, max_cells = args
    out, notes = {}, {}
    for m in metrics:
        if m == "nss":
            out[m] = nss(pred, fix)
        elif m == "cc":
            out[m] = cc(pred, den)
        elif m == "kl":
            out[m] = kl_div(pred, den)
        elif m == "auc_judd":
            out[m] = auc_judd(pred, fix)
        elif m == "sauc":
            # per-image seed keeps results independent of scheduling
            out[m] = sauc(pred, fix, others, seed + k)
        elif m == "sim":
            out[m] = sim(pred, den)
        elif m == "emd":
            out[m], f = emd_with_info(pred, den, max_cells)
            if f > 1:
                notes["emd_block"] = f
    return out, notes


def evaluate(items: Sequence, metrics: Iterable[str] = METRIC_NAMES, seed: int = 0,
             max_cells: int = EMD_MAX_CELLS, workers: int = 4) -> MetricReport:
    """Score ``(image_id, pred, den, fix)`` tuples; the order of ``items`` is kept.

    sAUC draws negatives from the fixations of all the other items.
    """
    metrics = tuple(metrics)
    bad = [m for m in metrics if m not in METRIC_NAMES]
    if bad:
        raise ValueError(f"unknown metrics {bad}; choose from {list(METRIC_NAMES)}")
    items = list(items)
    fixes = [it[3] for it in items]
    jobs = []
    for k, (_, pred, den, fix) in enumerate(items):
        others = fixes[:k] + fixes[k + 1:]
        jobs.append((k, pred, den, fix, metrics, others, seed, max_cells))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(_evaluate_one, jobs))
    report = MetricReport(metrics, meta={
        "kl": "both maps normalized to unit sum", "kl_eps": KL_EPS,
        "sauc_seed": seed, "emd_max_cells": max_cells,
    })
    blocks = {}
    for (iid, *_), (vals, notes) in zip(items, results):
        report.add(iid, vals)
        if "emd_block" in notes:
            blocks[str(iid)] = notes["emd_block"]
    if blocks:
        report.meta["emd_downsampled"] = blocks
    return report
