"""Segmentation and attack quality measures.

Per-class IoU follows the usual confusion-matrix form TP / (TP + FP + FN).
Classes absent from both prediction and ground truth are excluded from the
average; a class that only appears in the prediction contributes IoU 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ValueError("pred and gt must be equal-length 1-D arrays")
    if pred.size == 0:
        raise ValueError("empty label arrays")
    return pred, gt


def accuracy(pred, gt) -> float:
    """Fraction of points whose predicted label equals ground truth."""
    pred, gt = _check_pair(pred, gt)
    return float((pred == gt).mean())


def confusion(pred, gt, num_classes: int) -> np.ndarray:
    pred, gt = _check_pair(pred, gt)
    if pred.min() < 0 or pred.max() >= num_classes or gt.min() < 0 or gt.max() >= num_classes:
        raise ValueError("labels outside [0, num_classes)")
    return np.bincount(gt * num_classes + pred,
                       minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_per_class(pred, gt, num_classes: int) -> np.ndarray:
    """Length-C vector; NaN marks classes absent from both arrays."""
    cm = confusion(pred, gt, num_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    union = tp + fp + fn
    out = np.full(num_classes, np.nan)
    live = union > 0
    out[live] = tp[live] / union[live]
    return out


def aiou(pred, gt, num_classes: int) -> float:
    """Mean IoU over classes present in prediction or ground truth."""
    per = iou_per_class(pred, gt, num_classes)
    if np.all(np.isnan(per)):
        raise ValueError("no class present")
    return float(np.nanmean(per))


def psr(pred_on_targets, target_labels) -> float:
    """Perturbation success rate: fraction of attacked points predicted
    as their attacker-chosen label."""
    pred, want = _check_pair(pred_on_targets, target_labels)
    return float((pred == want).mean())


def oob_metrics(pred, gt, target_indices, num_classes: int) -> tuple:
    """(accuracy, aIoU) over points outside the attacked set."""
    pred, gt = _check_pair(pred, gt)
    mask = np.ones(pred.size, dtype=bool)
    idx = np.asarray(target_indices, dtype=np.int64)
    if idx.size:
        if idx.min() < 0 or idx.max() >= pred.size:
            raise ValueError("target index outside cloud")
        mask[idx] = False
    if not mask.any():
        raise ValueError("no points outside the attacked set")
    return accuracy(pred[mask], gt[mask]), aiou(pred[mask], gt[mask], num_classes)


@dataclass(frozen=True)
class MetricBlock:
    """Bundle the CLI tables and attack reports are built from. PSR and
    out-of-bounds values are present only for object-hiding runs."""

    accuracy: float
    aiou: float
    per_class_iou: np.ndarray
    psr: float | None = None
    oob_accuracy: float | None = None
    oob_aiou: float | None = None

    def as_lines(self) -> list:
        lines = [f"accuracy={self.accuracy:.6f}", f"aiou={self.aiou:.6f}"]
        per = ",".join("nan" if np.isnan(v) else f"{v:.6f}" for v in self.per_class_iou)
        lines.append(f"per_class_iou={per}")
        if self.psr is not None:
            lines.append(f"psr={self.psr:.6f}")
        if self.oob_accuracy is not None:
            lines.append(f"oob_accuracy={self.oob_accuracy:.6f}")
            lines.append(f"oob_aiou={self.oob_aiou:.6f}")
        return lines


def evaluate(pred, gt, num_classes: int, target_indices=None,
             target_labels=None) -> MetricBlock:
    """Full metric block; pass the attacked indices and their target
    labels to add PSR and out-of-bounds numbers."""
    pred, gt = _check_pair(pred, gt)
    block = {
        "accuracy": accuracy(pred, gt),
        "aiou": aiou(pred, gt, num_classes),
        "per_class_iou": iou_per_class(pred, gt, num_classes),
    }
    if target_labels is not None:
        idx = np.asarray(target_indices, dtype=np.int64)
        block["psr"] = psr(pred[idx], target_labels)
        oacc, oaiou = oob_metrics(pred, gt, idx, num_classes)
        block["oob_accuracy"] = oacc
        block["oob_aiou"] = oaiou
    return MetricBlock(**block)
