"""mIoU, confusion matrix and out-of-candidate error statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import IGNORE
from .ocr import candidate_mask


@dataclass
class EvalReport:
    per_class_iou: list  # float or None (undefined)
    miou: float
    pixel_accuracy: float
    oc_image_error_rate: float | None = None
    oc_pixel_fraction: float | None = None
    confusion: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "pixel_accuracy": self.pixel_accuracy,
            "per_class_iou": self.per_class_iou,
            "oc_image_error_rate": self.oc_image_error_rate,
            "oc_pixel_fraction": self.oc_pixel_fraction,
            "confusion": None if self.confusion is None else self.confusion.tolist(),
        }


def confusion_matrix(preds, gts, num_total: int) -> np.ndarray:
    """Rows are ground-truth classes, columns predicted; ignore pixels dropped."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground-truth masks")
    cm = np.zeros((num_total, num_total), dtype=np.int64)
    for pred, gt in zip(preds, gts):
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
        valid = gt != IGNORE
        g = gt[valid].astype(np.int64)
        p = pred[valid].astype(np.int64)
        if p.size and max(g.max(), p.max()) >= num_total:
            raise ValueError(f"class index outside 0..{num_total - 1}")
        cm += np.bincount(g * num_total + p, minlength=num_total * num_total).reshape(num_total, num_total)
    return cm


def iou_from_confusion(cm: np.ndarray):
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    per_class = [float(tp[c] / denom[c]) if denom[c] > 0 else None for c in range(cm.shape[0])]
    defined = [v for v in per_class if v is not None]
    miou = float(np.mean(defined)) if defined else math.nan
    return per_class, miou


def miou(preds, gts, num_total: int) -> EvalReport:
    """Dataset-aggregated IoU. Classes absent from both pred and gt are left out of the mean."""
    cm = confusion_matrix(preds, gts, num_total)
    per_class, m = iou_from_confusion(cm)
    total = cm.sum()
    acc = float(np.trace(cm) / total) if total else math.nan
    return EvalReport(per_class_iou=per_class, miou=m, pixel_accuracy=acc, confusion=cm)


def oc_pixel_counts(pred, tags, num_total: int) -> dict[int, int]:
    """Offending class -> pixel count for one prediction mask."""
    pred = np.asarray(pred)
    cand = candidate_mask(tags, max(num_total, int(pred[pred != IGNORE].max(initial=0)) + 1))
    valid = pred[pred != IGNORE]
    bad = valid[~cand[valid]]
    classes, counts = np.unique(bad, return_counts=True)
    return {int(c): int(n) for c, n in zip(classes, counts)}


def oc_error_stats(preds, tag_sets, num_total: int | None = None):
    """(fraction of images with >= 1 OC pixel, fraction of all valid pixels that are OC)."""
    if len(preds) != len(tag_sets):
        raise ValueError(f"{len(preds)} predictions vs {len(tag_sets)} tag sets")
    if not preds:
        return 0.0, 0.0
    if num_total is None:
        num_total = 1 + max(int(np.asarray(p)[np.asarray(p) != IGNORE].max(initial=0)) for p in preds)
        num_total = max(num_total, 1 + max(max(getattr(t, "tags", t)) for t in tag_sets))
    bad_images = bad_pixels = total = 0
    for pred, tags in zip(preds, tag_sets):
        counts = oc_pixel_counts(pred, tags, num_total)
        n_bad = sum(counts.values())
        bad_images += n_bad > 0
        bad_pixels += n_bad
        total += int(np.count_nonzero(np.asarray(pred) != IGNORE))
    return bad_images / len(preds), (bad_pixels / total if total else 0.0)


def evaluate(preds, gts, tag_sets, num_total: int) -> EvalReport:
    report = miou(preds, gts, num_total)
    report.oc_image_error_rate, report.oc_pixel_fraction = oc_error_stats(preds, tag_sets, num_total)
    return report
