"""Confusion matrices, mIoU and model evaluation (2D, 3D and averaged predictions)."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

REPORT_SCHEMA_VERSION = 1


class UndefinedMetricError(ValueError):
    pass


class ConfusionMatrix:
    """C x C counts; rows are ground truth, columns are predictions."""

    def __init__(self, n_classes):
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def accumulate(self, predictions, labels):
        preds = np.asarray(predictions, dtype=np.int64).reshape(-1)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if preds.shape != labels.shape:
            raise ValueError(f"{preds.size} predictions vs {labels.size} labels")
        C = self.n_classes
        if preds.size and (preds.min() < 0 or preds.max() >= C or labels.min() < 0 or labels.max() >= C):
            raise ValueError(f"class id outside [0, {C})")
        self.counts += np.bincount(labels * C + preds, minlength=C * C).reshape(C, C)
        return self

    def merge(self, other: "ConfusionMatrix"):
        self.counts += other.counts
        return self

    @property
    def total(self):
        return int(self.counts.sum())


def accumulate(matrix: ConfusionMatrix, predictions, labels):
    return matrix.accumulate(predictions, labels)


def miou(matrix):
    """Mean IoU in percent over classes with a non-empty union, plus per-class IoUs.

    Classes whose union is empty get ``nan`` in the per-class list.
    """
    counts = matrix.counts if isinstance(matrix, ConfusionMatrix) else np.asarray(matrix)
    diag = np.diag(counts).astype(np.float64)
    union = counts.sum(0) + counts.sum(1) - diag
    present = union > 0
    if not present.any():
        raise UndefinedMetricError("mIoU undefined: every class has an empty union")
    iou = np.full(len(diag), np.nan)
    iou[present] = diag[present] / union[present]
    return float(100.0 * iou[present].mean()), (100.0 * iou).tolist()


@dataclass
class EvalReport:
    miou_2d: float
    miou_3d: float
    miou_avg: float
    iou_2d: list
    iou_3d: list
    iou_avg: list
    n_points: int
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self):
        return asdict(self)

    def summary(self):
        return (f"mIoU 2D {self.miou_2d:6.2f} | 3D {self.miou_3d:6.2f} | "
                f"Avg {self.miou_avg:6.2f}  ({self.n_points} points)")


def evaluate(model, dataset, norm=None):
    """Unmasked forward pass over every scene.

    2D and 3D scores use each segmentation head's argmax; 'Avg' uses the
    argmax of the mean of the two softmax distributions. ``argmax`` breaks
    ties toward the lowest class index.
    """
    from .trainer import predict_probs

    C = dataset.n_classes
    mats = {k: ConfusionMatrix(C) for k in ("2d", "3d", "avg")}
    for scene, (p2, p3) in zip(dataset.scenes, predict_probs(model, dataset, norm)):
        mats["2d"].accumulate(p2.argmax(1), scene.labels)
        mats["3d"].accumulate(p3.argmax(1), scene.labels)
        mats["avg"].accumulate(((p2 + p3) / 2).argmax(1), scene.labels)
    (m2, i2), (m3, i3), (ma, ia) = (miou(mats[k]) for k in ("2d", "3d", "avg"))
    return EvalReport(m2, m3, ma, i2, i3, ia, mats["avg"].total)
