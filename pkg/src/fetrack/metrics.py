"""Precision, normalized precision and success for single-object tracking."""

from __future__ import annotations

import numpy as np

from fetrack.errors import InputError

PR_THRESHOLD_PX = 20.0
NPR_THRESHOLD = 0.2
SR_THRESHOLDS = np.linspace(0.0, 1.0, 21)


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    if pred.shape != gt.shape:
        raise InputError(f"metrics: {len(pred)} predictions vs {len(gt)} ground-truth boxes")
    if len(gt) == 0:
        raise InputError("metrics: empty sequence")
    return pred, gt


def centers(boxes: np.ndarray) -> np.ndarray:
    return boxes[:, :2] + boxes[:, 2:] / 2


def center_errors(pred, gt) -> np.ndarray:
    pred, gt = _pair(pred, gt)
    return np.linalg.norm(centers(pred) - centers(gt), axis=1)


def precision(pred, gt, threshold_px: float = PR_THRESHOLD_PX) -> float:
    return float(np.mean(center_errors(pred, gt) < threshold_px))


def norm_precision(pred, gt, threshold: float = NPR_THRESHOLD) -> float:
    """Center offsets scaled by the gt width and height before thresholding."""
    pred, gt = _pair(pred, gt)
    d = (centers(pred) - centers(gt)) / gt[:, 2:]
    return float(np.mean(np.linalg.norm(d, axis=1) < threshold))


def ious(pred, gt) -> np.ndarray:
    pred, gt = _pair(pred, gt)
    x1 = np.maximum(pred[:, 0], gt[:, 0])
    y1 = np.maximum(pred[:, 1], gt[:, 1])
    x2 = np.minimum(pred[:, 0] + pred[:, 2], gt[:, 0] + gt[:, 2])
    y2 = np.minimum(pred[:, 1] + pred[:, 3], gt[:, 1] + gt[:, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    union = pred[:, 2] * pred[:, 3] + gt[:, 2] * gt[:, 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def success(pred, gt, thresholds=SR_THRESHOLDS) -> tuple[np.ndarray, float]:
    """Success curve (fraction with IoU above each threshold) and its mean (AUC)."""
    iou = ious(pred, gt)
    curve = np.array([np.mean(iou > t) for t in thresholds])
    return curve, float(curve.mean())


def evaluate(pred, gt) -> dict:
    _, auc = success(pred, gt)
    return {
        "PR": precision(pred, gt),
        "NPR": norm_precision(pred, gt),
        "SR_auc": auc,
        "SR@0.5": float(np.mean(ious(pred, gt) > 0.5)),
    }


def format_report(metrics: dict) -> str:
    return " ".join(f"{k}={v:.4f}" for k, v in metrics.items())
