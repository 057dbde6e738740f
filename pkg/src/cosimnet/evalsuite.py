"""Change-detection scoring: confusion counts, P/R/F, PR sweeps and map contrast."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidArgument
from .losses import ChangeMask
from .metric import ChangeMap


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class EvalReport:
    precision: float
    recall: float
    f_score: float
    fpr: float
    fnr: float
    threshold: float
    pr_points: list[tuple[float, float, float]] = field(default_factory=list)
    best_threshold: float = 0.0
    best_f: float = 0.0
    zero_denominators: list[str] = field(default_factory=list)

    def to_json(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _values(cm) -> np.ndarray:
    if isinstance(cm, ChangeMap):
        return cm.values.data
    if hasattr(cm, "data") and not isinstance(cm, np.ndarray):
        return cm.data
    return np.asarray(cm, dtype=float)


def _changed(mask) -> np.ndarray:
    if isinstance(mask, ChangeMask):
        return mask.changed
    return np.asarray(mask, dtype=bool)


def binarize(cm, theta: float) -> ChangeMask:
    """Changed iff value >= theta."""
    if not 0.0 <= theta <= 1.0:
        raise InvalidArgument(f"threshold must lie in [0, 1], got {theta}")
    return ChangeMask.from_changed(_values(cm) >= theta)


def confusion(pred, gt) -> ConfusionCounts:
    """Counts with changed pixels as the positive class."""
    p, g = _changed(pred), _changed(gt)
    if p.shape != g.shape:
        raise InvalidArgument(f"prediction {p.shape} and ground truth {g.shape} differ in size")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def precision_recall_f(c: ConfusionCounts) -> tuple[float, float, float]:
    p = _ratio(c.tp, c.tp + c.fp)
    r = _ratio(c.tp, c.tp + c.fn)
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def fpr_fnr(c: ConfusionCounts) -> tuple[float, float]:
    return _ratio(c.fp, c.fp + c.tn), _ratio(c.fn, c.fn + c.tp)


def degenerate_terms(c: ConfusionCounts) -> list[str]:
    """Names of rates whose denominator was zero (reported as 0)."""
    out = []
    if c.tp + c.fp == 0:
        out.append("precision")
    if c.tp + c.fn == 0:
        out.append("recall")
        out.append("fnr")
    if c.fp + c.tn == 0:
        out.append("fpr")
    return out


def pr_curve(maps: Sequence, gts: Sequence, n_thresholds: int = 101):
    """Pooled precision/recall at evenly spaced thresholds over [0, 1].

    Returns ``(points, best_threshold, best_f)`` where points are
    ``(threshold, precision, recall)`` and ties in F go to the lowest threshold.
    """
    if len(maps) != len(gts):
        raise InvalidArgument(f"{len(maps)} maps but {len(gts)} ground-truth masks")
    if n_thresholds < 2:
        raise InvalidArgument(f"need at least 2 thresholds, got {n_thresholds}")
    thresholds = np.linspace(0.0, 1.0, n_thresholds)
    counts = [ConfusionCounts() for _ in thresholds]
    for m, g in zip(maps, gts):
        v, gt = _values(m), _changed(g)
        if v.shape != gt.shape:
            raise InvalidArgument(f"map {v.shape} and mask {gt.shape} differ in size")
        # changed-pixel and unchanged-pixel score lists, sorted once per item
        pos = np.sort(v[gt])
        neg = np.sort(v[~gt])
        n_pos_above = pos.size - np.searchsorted(pos, thresholds, side="left")
        n_neg_above = neg.size - np.searchsorted(neg, thresholds, side="left")
        for i in range(n_thresholds):
            tp, fp = int(n_pos_above[i]), int(n_neg_above[i])
            counts[i] = counts[i] + ConfusionCounts(tp, fp, neg.size - fp, pos.size - tp)
    points = []
    best_t, best_f = float(thresholds[0]), -1.0
    for t, c in zip(thresholds, counts):
        p, r, f = precision_recall_f(c)
        points.append((float(t), p, r))
        if f > best_f:
            best_t, best_f = float(t), f
    return points, best_t, best_f


def evaluate(maps: Sequence, gts: Sequence, threshold: float | None = None,
             n_thresholds: int = 101) -> EvalReport:
    """Full report; scores at ``threshold`` or, if None, at the best PR threshold."""
    points, best_t, best_f = pr_curve(maps, gts, n_thresholds)
    theta = best_t if threshold is None else threshold
    total = ConfusionCounts()
    for m, g in zip(maps, gts):
        total = total + confusion(binarize(m, theta), g)
    p, r, f = precision_recall_f(total)
    fpr, fnr = fpr_fnr(total)
    return EvalReport(p, r, f, fpr, fnr, theta, points, best_t, best_f, degenerate_terms(total))


def write_pr_csv(points, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall"])
        for t, p, r in points:
            w.writerow([repr(t), repr(p), repr(r)])


def michelson_contrast(values) -> float:
    """(L_max - L_min) / (L_max + L_min) for a non-negative map; 0 for an all-zero map."""
    v = _values(values)
    if v.size == 0:
        return 0.0
    if (v < 0).any():
        raise InvalidArgument("michelson_contrast needs a non-negative map")
    hi, lo = float(v.max()), float(v.min())
    return (hi - lo) / (hi + lo) if hi + lo > 0 else 0.0


def rms_contrast(values) -> float:
    """Standard deviation over mean; 0 when the mean is 0."""
    v = _values(values)
    if v.size == 0:
        return 0.0
    mu = float(v.mean())
    if mu == 0.0:
        return 0.0
    return float(np.sqrt(np.mean((v - mu) ** 2))) / mu


@dataclass
class ContrastReport:
    """Rows of (epoch, layer, metric kind, michelson, rms)."""

    rows: list[tuple[int, int, str, float, float]] = field(default_factory=list)

    def value(self, epoch: int, layer: int, metric: str, which: str = "rms") -> float:
        for e, l, m, cm, cr in self.rows:
            if (e, l, m) == (epoch, layer, metric):
                return cr if which == "rms" else cm
        raise KeyError((epoch, layer, metric))

    def to_csv(self, path: str | os.PathLike) -> None:
        """Long format with header ``epoch,layer,metric,value``.

        ``metric`` combines the contrast kind and the distance, e.g.
        ``rms_euclidean``.
        """
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "layer", "metric", "value"])
            for e, l, m, cm, cr in self.rows:
                w.writerow([e, l, f"rms_{m}", repr(cr)])
                w.writerow([e, l, f"michelson_{m}", repr(cm)])
