"""Confusion-matrix segmentation metrics: IoU, mIoU, mAvg, sqIoU/sqAvg and small-part mIoU.

Undefined values (a class absent from both GT and prediction, an object with
no defined part) are NaN and are left out of every mean.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import PartTaxonomy

SMALL_PART_AREA = 25 * 25
SQIOU_NOTE = "sqIoU = sum_i sqrt(a_ic) IoU_ic / sum_i sqrt(a_ic) over images with GT area a_ic > 0"


def _nanmean(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0 or np.isnan(values).all():
        return float("nan")
    return float(np.nanmean(values))


class ConfusionMatrix:
    """K x K pixel counts, ``counts[gt, pred]``. Merge with ``+``."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = counts

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} vs ground truth {gt.shape}")
        k = self.num_classes
        for name, arr in (("prediction", pred), ("ground truth", gt)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                bad = arr[(arr < 0) | (arr >= k)][0]
                raise ValueError(f"{name} label {bad} outside [0, {k})")
        idx = gt.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different size")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        out = np.full(self.num_classes, np.nan)
        np.divide(tp, union, out=out, where=union > 0)
        return out


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    per_class = cm.iou()
    if np.isnan(per_class).all():
        warnings.warn("mIoU undefined: no class present in GT or prediction", RuntimeWarning)
    return per_class, _nanmean(per_class)


def mavg(per_class: np.ndarray, tax: PartTaxonomy) -> tuple[dict[str, float], float]:
    """Average part scores within each object, then across objects (background excluded)."""
    per_class = np.asarray(per_class, dtype=np.float64)
    per_object = {obj: _nanmean(per_class[ids]) for obj, ids in tax.object_parts().items()}
    return per_object, _nanmean(list(per_object.values()))


@dataclass
class ImageRecord:
    """Per-image GT areas and IoUs, the input of the size-aware metrics."""

    areas: np.ndarray
    ious: np.ndarray

    @classmethod
    def from_pair(cls, pred: np.ndarray, gt: np.ndarray, num_classes: int) -> "ImageRecord":
        cm = ConfusionMatrix(num_classes).accumulate(pred, gt)
        return cls(cm.counts.sum(1), cm.iou())


def sqiou(records: list[ImageRecord], tax: PartTaxonomy | None = None):
    """Square-root-area weighted per-image IoU.

    Returns ``(per_class, mean)``; with a taxonomy also ``(per_object, sqavg)``.
    """
    k = len(records[0].areas) if records else (tax.num_classes if tax else 0)
    num = np.zeros(k)
    den = np.zeros(k)
    for r in records:
        w = np.sqrt(r.areas.astype(np.float64))
        present = r.areas > 0
        num[present] += w[present] * r.ious[present]
        den[present] += w[present]
    per_class = np.full(k, np.nan)
    np.divide(num, den, out=per_class, where=den > 0)
    mean = _nanmean(per_class)
    if tax is None:
        return per_class, mean
    per_object, sqavg = mavg(per_class, tax)
    return per_class, mean, per_object, sqavg


def small_part_regions(gt: np.ndarray, cls: int, threshold_area: int = SMALL_PART_AREA,
                       dilate: int = 2) -> np.ndarray | None:
    """Union of dilated bounding boxes of the 4-connected GT components of ``cls`` below the area threshold."""
    comp, n = ndimage.label(gt == cls)
    if n == 0:
        return None
    areas = np.bincount(comp.ravel())[1:]
    region = np.zeros(gt.shape, dtype=bool)
    found = False
    h, w = gt.shape
    for lab, sl in enumerate(ndimage.find_objects(comp), start=1):
        if areas[lab - 1] >= threshold_area:
            continue
        found = True
        ys, xs = sl
        region[max(ys.start - dilate, 0):min(ys.stop + dilate, h),
               max(xs.start - dilate, 0):min(xs.stop + dilate, w)] = True
    return region if found else None


@dataclass
class SmallPartResult:
    per_class: np.ndarray
    per_object: dict[str, float]
    mean: float
    defined: bool = True


class SmallPartAccumulator:
    """Dataset-level intersection/union per part class, restricted to small-part regions."""

    def __init__(self, num_classes: int, threshold_area: int = SMALL_PART_AREA):
        self.num_classes = num_classes
        self.threshold_area = threshold_area
        self.inter = np.zeros(num_classes, dtype=np.int64)
        self.union = np.zeros(num_classes, dtype=np.int64)
        self.seen = np.zeros(num_classes, dtype=bool)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "SmallPartAccumulator":
        for c in range(1, self.num_classes):
            region = small_part_regions(gt, c, self.threshold_area)
            if region is None:
                continue
            self.seen[c] = True
            g = (gt == c) & region
            p = (pred == c) & region
            self.inter[c] += np.count_nonzero(g & p)
            self.union[c] += np.count_nonzero(g | p)
        return self

    def __add__(self, other: "SmallPartAccumulator") -> "SmallPartAccumulator":
        out = SmallPartAccumulator(self.num_classes, self.threshold_area)
        out.inter = self.inter + other.inter
        out.union = self.union + other.union
        out.seen = self.seen | other.seen
        return out

    def result(self, tax: PartTaxonomy) -> SmallPartResult:
        per_class = np.full(self.num_classes, np.nan)
        ok = self.seen & (self.union > 0)
        per_class[ok] = self.inter[ok] / self.union[ok]
        if not self.seen.any():
            return SmallPartResult(per_class, {o: float("nan") for o in tax.objects}, float("nan"), defined=False)
        per_object, mean = mavg(per_class, tax)
        return SmallPartResult(per_class, per_object, mean)


def miou_small(preds, gts, tax: PartTaxonomy, threshold_area: int = SMALL_PART_AREA) -> SmallPartResult:
    acc = SmallPartAccumulator(tax.num_classes, threshold_area)
    for p, g in zip(preds, gts):
        acc.accumulate(np.asarray(p), np.asarray(g))
    return acc.result(tax)


class Evaluator:
    """Streams (pred, gt) pairs and produces the whole metric family."""

    def __init__(self, tax: PartTaxonomy):
        self.tax = tax
        self.cm = ConfusionMatrix(tax.num_classes)
        self.records: list[ImageRecord] = []
        self.small = SmallPartAccumulator(tax.num_classes)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        self.cm.accumulate(pred, gt)
        self.records.append(ImageRecord.from_pair(pred, gt, self.tax.num_classes))
        self.small.accumulate(pred, gt)

    def report(self) -> "MetricReport":
        per_class, m = miou(self.cm)
        _, avg = mavg(per_class, self.tax)
        sq_class, sq, _, sqavg = sqiou(self.records, self.tax)
        small = self.small.result(self.tax)
        return MetricReport(
            miou=m, mavg=avg, sqiou=sq, sqavg=sqavg, miou_small=small.mean,
            per_class_iou=per_class, per_class_sqiou=sq_class, per_class_small=small.per_class,
            class_names=self.tax.class_names,
        )


@dataclass
class MetricReport:
    miou: float
    mavg: float
    sqiou: float
    sqavg: float
    miou_small: float
    per_class_iou: np.ndarray
    per_class_sqiou: np.ndarray
    per_class_small: np.ndarray
    class_names: list[str] = field(default_factory=list)

    HEADLINE = ("mIoU", "mAvg", "sqIoU", "sqAvg", "mIoU_small")

    def headline(self) -> dict[str, float]:
        """Metric values in percent, as reported in the tables."""
        vals = (self.miou, self.mavg, self.sqiou, self.sqavg, self.miou_small)
        return {k: 100.0 * v for k, v in zip(self.HEADLINE, vals)}

    def to_json(self, **extra) -> dict:
        def clean(a):
            return [None if np.isnan(v) else float(v) for v in a]

        return {
            **extra,
            "metrics": dict(zip(self.HEADLINE, clean(self.headline().values()))),
            "per_class": {
                "names": self.class_names,
                "iou": clean(self.per_class_iou),
                "sqiou": clean(self.per_class_sqiou),
                "iou_small": clean(self.per_class_small),
            },
            "notes": [SQIOU_NOTE],
        }

    def write_per_class_csv(self, path: str | Path, column: str = "model") -> None:
        with open(path, "w", newline="") as f:
            f.write(f"# {SQIOU_NOTE}\n")
            w = csv.writer(f)
            w.writerow(["class", f"{column}_iou", f"{column}_sqiou", f"{column}_iou_small"])
            for name, a, b, c in zip(self.class_names, self.per_class_iou,
                                     self.per_class_sqiou, self.per_class_small):
                w.writerow([name] + ["" if np.isnan(v) else f"{100 * v:.4f}" for v in (a, b, c)])


def write_report_json(path: str | Path, report: MetricReport, **extra) -> None:
    Path(path).write_text(json.dumps(report.to_json(**extra), indent=2))
