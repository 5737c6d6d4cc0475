"""Pixel-level and object-level landslide metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import LANDSLIDE, SLOPE

# 0/0 ratios: 1.0 when the undefined ratio means "nothing to find and nothing
# found", 0.0 otherwise
PERFECT_ABSENCE = 1.0
DEGENERATE = 0.0
REFERENCE_TILE_AREA = 512 * 512


@dataclass
class ConfusionCounts:
    TP: int = 0
    TN: int = 0
    FP: int = 0
    FN: int = 0

    @property
    def total(self):
        return self.TP + self.TN + self.FP + self.FN

    def __add__(self, other):
        return ConfusionCounts(self.TP + other.TP, self.TN + other.TN,
                               self.FP + other.FP, self.FN + other.FN)

    def to_dict(self):
        return asdict(self)


def confusion_counts(pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    p = pred.astype(bool)
    t = truth.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, int(p.size) - tp - fp - fn, fp, fn)


def aggregate_counts(preds, truths):
    """Micro-aggregation: sum counts over the dataset before forming ratios."""
    total = ConfusionCounts()
    for p, t in zip(preds, truths):
        total = total + confusion_counts(p, t)
    return total


def _ratio(num, den, absent):
    if den:
        return num / den
    return PERFECT_ABSENCE if absent else DEGENERATE


def pixel_metrics(c: ConfusionCounts):
    if c.total <= 0:
        raise ValueError("no pixels evaluated")
    nothing_to_find = c.TP + c.FN == 0
    nothing_found = c.TP + c.FP == 0
    precision = _ratio(c.TP, c.TP + c.FP, nothing_to_find)
    recall = _ratio(c.TP, c.TP + c.FN, nothing_found)
    iou1 = _ratio(c.TP, c.TP + c.FP + c.FN, True)
    iou0 = _ratio(c.TN, c.TN + c.FN + c.FP, True)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "PA": (c.TP + c.TN) / c.total,
        "precision": precision,
        "recall": recall,
        "landslide_IoU": iou1,
        "slope_IoU": iou0,
        "mIoU": (iou1 + iou0) / 2,
        "F1": f1,
    }


def scaled_thresholds(tile_area, hit=400, fp=100):
    """Object-rule thresholds scaled from 512x512 tiles to ``tile_area``."""
    s = tile_area / REFERENCE_TILE_AREA
    return max(int(round(hit * s)), 1), max(int(round(fp * s)), 1)


def object_level_accuracy(preds, truths, labels=None, hit=400, fp=100, scale=True):
    """Count-based object accuracies from segmentation output.

    A landslide sample is correct when at least ``hit`` of its landslide
    pixels are predicted; a slope sample is correct when at most ``fp``
    pixels are predicted as landslide.
    """
    preds = [np.asarray(p).astype(bool) for p in preds]
    truths = [np.asarray(t).astype(bool) for t in truths]
    if labels is None:
        labels = [LANDSLIDE if t.any() else SLOPE for t in truths]
    if not (len(preds) == len(truths) == len(labels)):
        raise ValueError("preds, truths and labels must have equal length")
    hits = {LANDSLIDE: [], SLOPE: []}
    for p, t, lab in zip(preds, truths, labels):
        if p.shape != t.shape:
            raise ValueError(f"prediction {p.shape} and truth {t.shape} differ in shape")
        if bool(t.any()) != (lab == LANDSLIDE):
            raise ValueError("object label disagrees with its mask")
        h, f = scaled_thresholds(t.size, hit, fp) if scale else (hit, fp)
        if lab == LANDSLIDE:
            hits[LANDSLIDE].append(np.count_nonzero(p & t) >= h)
        else:
            hits[SLOPE].append(np.count_nonzero(p) <= f)
    acc_l = float(np.mean(hits[LANDSLIDE])) if hits[LANDSLIDE] else float("nan")
    acc_s = float(np.mean(hits[SLOPE])) if hits[SLOPE] else float("nan")
    return {"acc_landslide": acc_l, "acc_slope": acc_s, "acc_avg": average_accuracy(acc_s, acc_l),
            "n_landslide": len(hits[LANDSLIDE]), "n_slope": len(hits[SLOPE])}


def average_accuracy(acc_slope, acc_landslide):
    """Equal-weight class mean; a class absent from the split is ignored."""
    vals = [v for v in (acc_slope, acc_landslide) if not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def binary_metrics(pred_labels, true_labels):
    """Accuracy/precision/recall/F1 with landslide as the positive class."""
    p = np.asarray(pred_labels) == LANDSLIDE
    t = np.asarray(true_labels) == LANDSLIDE
    c = confusion_counts(p, t)
    m = pixel_metrics(c)
    return {"accuracy": m["PA"], "precision": m["precision"], "recall": m["recall"],
            "F1": m["F1"], **c.to_dict()}


def segmentation_report(preds, truths, hit=400, fp=100):
    counts = aggregate_counts(preds, truths)
    out = pixel_metrics(counts)
    out.update(object_level_accuracy(preds, truths, hit=hit, fp=fp))
    out["counts"] = counts.to_dict()
    out["conventions"] = {"zero_over_zero_perfect_absence": PERFECT_ABSENCE,
                          "zero_over_zero_otherwise": DEGENERATE,
                          "aggregation": "micro", "object_rule": "hit >= threshold; fp <= threshold",
                          "thresholds_scaled_to_tile_area": True}
    return out
