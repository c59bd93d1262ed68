"""Confusion counting and precision / recall / DSC / IoU reporting."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import CLASS_NAMES, NUM_CLASSES

METRICS = ("precision", "recall", "dsc", "iou")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    total_pixels: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "fn"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if (arr < 0).any():
                raise ValueError(f"{name} counts must be non-negative")
            object.__setattr__(self, name, arr)

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    @property
    def tn(self) -> np.ndarray:
        return self.total_pixels - self.tp - self.fp - self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                               self.total_pixels + other.total_pixels)


def confusion_counts(pred, gt, num_classes: int = NUM_CLASSES) -> ConfusionCounts:
    pred = np.asarray(getattr(pred, "labels", pred)).astype(np.int64)
    gt = np.asarray(getattr(gt, "labels", gt)).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} labels outside [0, {num_classes - 1}]")
    joint = np.bincount(gt.ravel() * num_classes + pred.ravel(), minlength=num_classes ** 2)
    cm = joint.reshape(num_classes, num_classes)  # rows gt, cols pred
    tp = np.diag(cm)
    return ConfusionCounts(tp, cm.sum(0) - tp, cm.sum(1) - tp, int(pred.size))


def _ratio(num, den, empty):
    return num / den if den > 0 else empty


def _metrics(tp: int, fp: int, fn: int, empty: float) -> dict:
    """A class absent from both prediction and truth scores `empty` on every metric."""
    if tp + fp + fn == 0:
        return {m: empty for m in METRICS}
    return {
        "precision": _ratio(tp, tp + fp, 0.0),
        "recall": _ratio(tp, tp + fn, 0.0),
        "dsc": 2 * tp / (2 * tp + fp + fn),
        "iou": tp / (tp + fp + fn),
    }


def metrics_from_counts(c: ConfusionCounts, empty: float = 1.0) -> list[dict]:
    return [_metrics(int(c.tp[k]), int(c.fp[k]), int(c.fn[k]), empty) for k in range(c.num_classes)]


def dsc_from_iou(iou: float) -> float:
    return 2.0 * iou / (1.0 + iou)


@dataclass
class MetricsReport:
    class_names: tuple
    per_class: dict            # name -> metrics from dataset-summed counts (None if never seen)
    overall: dict              # micro over foreground classes, the primary figure
    overall_macro: dict        # mean of per-class foreground metrics
    per_class_image_mean: dict  # name -> metrics averaged over images whose truth contains the class
    num_images: int
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "per_class": self.per_class,
            "overall": self.overall,
            "overall_macro": self.overall_macro,
            "per_class_image_mean": self.per_class_image_mean,
            "num_images": self.num_images,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        for key, value in sorted(self.meta.items()):
            buf.write(f"# {key}={value}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "mode", *METRICS])
        for name in self.class_names:
            for mode, table in (("micro", self.per_class), ("image_mean", self.per_class_image_mean)):
                row = table.get(name)
                w.writerow([name, mode, *(("" if row is None else f"{row[m]:.6f}") for m in METRICS)])
        w.writerow(["overall", "micro", *(f"{self.overall[m]:.6f}" for m in METRICS)])
        w.writerow(["overall", "macro", *(f"{self.overall_macro[m]:.6f}" for m in METRICS)])
        return buf.getvalue()


def aggregate_report(
    per_image_counts: Sequence[ConfusionCounts],
    class_names: Sequence[str] = CLASS_NAMES,
    foreground: Optional[Sequence[int]] = None,
) -> MetricsReport:
    if not per_image_counts:
        raise ValueError("cannot aggregate an empty list of images")
    total = per_image_counts[0]
    for c in per_image_counts[1:]:
        total = total + c
    foreground = list(range(1, total.num_classes)) if foreground is None else list(foreground)
    if total.num_classes == 1:
        foreground = [0]

    per_class = {}
    for k, name in enumerate(class_names):
        m = _metrics(int(total.tp[k]), int(total.fp[k]), int(total.fn[k]), math.nan)
        per_class[name] = None if math.isnan(m["dsc"]) else m

    overall = _metrics(int(total.tp[foreground].sum()), int(total.fp[foreground].sum()),
                       int(total.fn[foreground].sum()), math.nan)

    fg_rows = [per_class[class_names[k]] for k in foreground if per_class[class_names[k]] is not None]
    overall_macro = {m: float(np.mean([r[m] for r in fg_rows])) if fg_rows else math.nan for m in METRICS}

    image_mean = {}
    for k, name in enumerate(class_names):
        rows = [_metrics(int(c.tp[k]), int(c.fp[k]), int(c.fn[k]), math.nan)
                for c in per_image_counts if c.tp[k] + c.fn[k] > 0]
        image_mean[name] = {m: float(np.mean([r[m] for r in rows])) for m in METRICS} if rows else None

    return MetricsReport(tuple(class_names), per_class, overall, overall_macro, image_mean,
                         len(per_image_counts))
