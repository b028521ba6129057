"""Confusion matrices, per-class IoU, mIoU and category-mean IoU."""

from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError, InvalidInputError


@dataclass
class ConfusionMatrix:
    """K x K counts; rows are ground truth, columns are predictions."""

    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes):
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def update(self, pred, truth):
        self.counts = confusion_update(self, pred, truth).counts
        return self

    def merge(self, other):
        return ConfusionMatrix(self.counts + other.counts)

    def overall_accuracy(self):
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else float("nan")


def confusion_update(cm, pred, truth):
    """Return a new matrix with one count added per (truth, pred) pair."""
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    k = cm.num_classes
    if pred.shape != truth.shape:
        raise InvalidInputError(f"{pred.size} predictions but {truth.size} labels")
    for name, ids in (("prediction", pred), ("label", truth)):
        if ids.size and (ids.min() < 0 or ids.max() >= k):
            raise InvalidInputError(f"{name} id out of range [0, {k})")
    flat = np.bincount(truth * k + pred, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(cm.counts + flat)


def class_iou(cm, c):
    """IoU of class ``c`` as TP / (T + P - TP); ``None`` when the class never occurs."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    tp = counts[c, c]
    t = counts[c, :].sum()
    p = counts[:, c].sum()
    if t + p == 0:
        return None
    return float(tp / (t + p - tp))


def per_class_iou(cm):
    return [class_iou(cm, c) for c in range(cm.num_classes)]


def mean_iou(cm):
    """Average IoU over classes that appear in the truth or the predictions."""
    defined = [v for v in per_class_iou(cm) if v is not None]
    if not defined:
        raise EvaluationError("mean IoU is undefined: no class occurs in truth or prediction")
    return float(np.mean(defined))


def shape_part_iou(pred, truth, parts):
    """Mean part IoU for one shape over the part ids of its category.

    A part absent from both truth and prediction counts as 1.0.
    """
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    ious = []
    for part in parts:
        in_pred = pred == part
        in_truth = truth == part
        union = np.count_nonzero(in_pred | in_truth)
        if union == 0:
            ious.append(1.0)
        else:
            ious.append(np.count_nonzero(in_pred & in_truth) / union)
    return float(np.mean(ious))


def category_mean_iou(per_shape_ious):
    """Average shape IoUs within each category, then average the categories.

    ``per_shape_ious`` maps a category to the list of its shapes' IoUs.
    """
    if not per_shape_ious:
        raise EvaluationError("no categories to average")
    means = []
    for category, ious in per_shape_ious.items():
        if len(ious) == 0:
            raise EvaluationError(f"category {category!r} has no shapes")
        means.append(float(np.mean(ious)))
    return float(np.mean(means))


def instance_mean_iou(per_shape_ious):
    """Average over all shapes regardless of category."""
    ious = [v for values in per_shape_ious.values() for v in values]
    if not ious:
        raise EvaluationError("no shapes to average")
    return float(np.mean(ious))


def format_report(cm, extra=None):
    """Plain-text table: one row per defined class, then summary lines."""
    lines = [f"{'class':>5}  {'iou':>8}  {'support':>8}"]
    support = cm.counts.sum(axis=1)
    for c, iou in enumerate(per_class_iou(cm)):
        if iou is None:
            continue
        lines.append(f"{c:>5}  {iou:8.4f}  {int(support[c]):>8}")
    lines.append(f"mIoU      {mean_iou(cm):.4f}")
    lines.append(f"accuracy  {cm.overall_accuracy():.4f}")
    for key, value in (extra or {}).items():
        lines.append(f"{key:<9} {value:.4f}")
    return "\n".join(lines) + "\n"


def report_records(cm, extra=None):
    """Machine-readable ``key=value`` lines, one per defined class plus summaries."""
    support = cm.counts.sum(axis=1)
    lines = []
    for c, iou in enumerate(per_class_iou(cm)):
        if iou is None:
            continue
        lines.append(f"class={c} iou={iou:.6f} support={int(support[c])}")
    lines.append(f"miou={mean_iou(cm):.6f}")
    lines.append(f"accuracy={cm.overall_accuracy():.6f}")
    for key, value in (extra or {}).items():
        lines.append(f"{key}={value:.6f}")
    return "\n".join(lines) + "\n"
