from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Metrics:
    confusion: np.ndarray  # rows: true class, cols: predicted class
    f1: np.ndarray
    iou: np.ndarray
    present: np.ndarray  # classes that occur in the labels

    @property
    def mean_f1(self) -> float:
        return float(self.f1[self.present].mean())

    @property
    def mean_iou(self) -> float:
        return float(self.iou[self.present].mean())

    @property
    def binary_iou(self) -> float:
        """IoU of the positive class, the usual figure for 2-class segmentation."""
        return float(self.iou[1])

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.confusion.sum())

    def summary(self) -> dict[str, float]:
        out = {"mean_f1": self.mean_f1, "mean_iou": self.mean_iou, "accuracy": self.accuracy}
        if len(self.f1) == 2:
            out["iou"] = self.binary_iou
        return out


def confusion_matrix(preds, labels, num_classes: int, ignore_index: int | None = None) -> np.ndarray:
    preds = np.asarray(preds).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if preds.shape != labels.shape:
        raise ValueError(f"predictions {preds.shape} and labels {labels.shape} differ in length")
    if ignore_index is not None:
        keep = labels != ignore_index
        preds, labels = preds[keep], labels[keep]
    if labels.size == 0:
        raise ValueError("no samples to score")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels outside 0..{num_classes - 1}")
    if preds.min() < 0 or preds.max() >= num_classes:
        raise ValueError(f"predictions outside 0..{num_classes - 1}")
    return np.bincount(labels * num_classes + preds, minlength=num_classes**2).reshape(num_classes, num_classes)


def compute_metrics(preds, labels, num_classes: int, ignore_index: int | None = None) -> Metrics:
    cm = confusion_matrix(preds, labels, num_classes, ignore_index)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(0) - tp
    fn = cm.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(2 * tp + fp + fn > 0, 2 * tp / (2 * tp + fp + fn), 0.0)
        iou = np.where(tp + fp + fn > 0, tp / (tp + fp + fn), 0.0)
    return Metrics(confusion=cm, f1=f1, iou=iou, present=cm.sum(1) > 0)
