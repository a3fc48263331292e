"""Per-image overlap and distance metrics plus the metrics.csv report."""
from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

COLUMNS = ("dsc", "iou", "recall", "precision", "f2", "hd")


@dataclass(frozen=True)
class MetricRow:
    stem: str
    dsc: float
    iou: float
    recall: float
    precision: float
    f2: float
    hd: float

    def values(self) -> tuple[float, ...]:
        return astuple(self)[1:]


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred.astype(bool), gt.astype(bool)


def confusion_counts(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int, int]:
    p, g = _check_pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return tp, fp, fn, tn


def _ratio(num: float, den: float) -> float:
    return 0.0 if den == 0 else num / den


def overlap_metrics(tp: int, fp: int, fn: int) -> tuple[float, float, float, float, float]:
    """(dsc, iou, recall, precision, f2) from pixel counts.

    Two empty masks score 1.0 everywhere. If only one mask is empty every
    score is 0, including the precision or recall term that would be 0/0.
    """
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0, 1.0, 1.0
    dsc = _ratio(2 * tp, 2 * tp + fp + fn)
    iou = _ratio(tp, tp + fp + fn)
    recall = _ratio(tp, tp + fn)
    precision = _ratio(tp, tp + fp)
    f2 = _ratio(5 * tp, 5 * tp + 4 * fn + fp)
    return dsc, iou, recall, precision, f2


def hausdorff(pred: np.ndarray, gt: np.ndarray) -> float:
    """Symmetric Hausdorff distance in pixels between foreground pixel sets.

    Uses Euclidean distance transforms. Both empty gives 0; exactly one empty
    gives the image diagonal.
    """
    a, b = _check_pair(pred, gt)
    has_a, has_b = a.any(), b.any()
    if not has_a and not has_b:
        return 0.0
    if has_a != has_b:
        return float(math.hypot(*a.shape))
    # distance from every pixel to the nearest foreground pixel of the other set
    dist_to_b = ndimage.distance_transform_edt(~b)
    dist_to_a = ndimage.distance_transform_edt(~a)
    return float(max(dist_to_b[a].max(), dist_to_a[b].max()))


def score_pair(stem: str, pred: np.ndarray, gt: np.ndarray) -> MetricRow:
    tp, fp, fn, _ = confusion_counts(pred, gt)
    return MetricRow(stem, *overlap_metrics(tp, fp, fn), hausdorff(pred, gt))


def aggregate(rows: Sequence[MetricRow]) -> MetricRow:
    if not rows:
        raise ValueError("cannot aggregate an empty list of metric rows")
    cols = np.array([r.values() for r in rows], dtype=np.float64)
    return MetricRow("__mean__", *(float(v) for v in cols.mean(axis=0)))


def write_report(rows: Sequence[MetricRow], path: str | Path) -> MetricRow:
    """Write metrics.csv (one row per image plus ``__mean__``); returns the mean row."""
    summary = aggregate(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("stem",) + COLUMNS)
        for r in list(rows) + [summary]:
            w.writerow([r.stem] + [f"{v:.6f}" for v in r.values()])
    return summary


def read_report(path: str | Path) -> list[MetricRow]:
    with Path(path).open() as fh:
        reader = csv.DictReader(fh)
        return [MetricRow(d["stem"], *(float(d[c]) for c in COLUMNS)) for d in reader]
