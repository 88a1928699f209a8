"""Confusion matrices, IoU, and bias decomposition on synthetic data."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .model import TwoHeadSegNet, combined_prediction, forward
from .synthdata import LabeledImage


@dataclass
class IoUReport:
    iou: List[Optional[float]]  # None where the class is absent from both prediction and truth
    miou: float
    confusion: np.ndarray

    def defined(self) -> List[int]:
        return [c for c, v in enumerate(self.iou) if v is not None]

    def same_as(self, other: "IoUReport") -> bool:
        return np.array_equal(self.confusion, other.confusion)


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int,
              ignore: Optional[np.ndarray] = None) -> np.ndarray:
    """cm[i, j] = number of unmasked pixels with truth i predicted j."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {gt.shape}")
    keep = np.ones(gt.shape, dtype=bool) if ignore is None else ~np.asarray(ignore, dtype=bool)
    p = pred[keep].astype(np.int64)
    g = gt[keep].astype(np.int64)
    for name, arr in (("prediction", p), ("truth", g)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} contains class ids outside [0, {num_classes})")
    return np.bincount(g * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_report(cm: np.ndarray) -> IoUReport:
    cm = np.asarray(cm, dtype=np.int64)
    inter = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    if not np.any(union > 0):
        raise ValueError("empty evaluation: no class has a nonzero union")
    iou = [float(i / u) if u > 0 else None for i, u in zip(inter, union)]
    miou = float(np.mean([v for v in iou if v is not None]))
    return IoUReport(iou, miou, cm)


def bias_decomposition(P: np.ndarray, pseudo_labels: np.ndarray, gt: np.ndarray) -> dict:
    """L1 magnitudes of (prediction - pseudo) and (pseudo - truth), averaged over pixels and classes."""
    P = np.asarray(P, dtype=np.float64)
    if P.shape[:-1] != np.shape(pseudo_labels) or np.shape(pseudo_labels) != np.shape(gt):
        raise ValueError("probability map, pseudo labels and truth must share spatial shape")
    eye = np.eye(P.shape[-1])
    p_hat = eye[pseudo_labels]
    p_true = eye[gt]
    return {
        "term_pred_vs_pseudo": float(np.abs(P - p_hat).mean()),
        "term_pseudo_vs_true": float(np.abs(p_hat - p_true).mean()),
    }


def predict(net: TwoHeadSegNet, images: np.ndarray, alpha: float = 1.0, beta: float = 0.5,
            batch: int = 50) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch):
        P, P_aux = forward(net, images[i:i + batch], mode="eval")
        out.append(combined_prediction(P, P_aux, alpha, beta))
    return np.concatenate(out)


def evaluate_checkpoint(net: TwoHeadSegNet, dataset: Sequence[LabeledImage],
                        alpha: float = 1.0, beta: float = 0.5) -> IoUReport:
    """Eval-mode forward, weighted head combination, dataset-level IoU."""
    images = np.stack([d.image for d in dataset])
    gt = np.stack([d.labels for d in dataset])
    ignore = np.stack([d.ignore for d in dataset])
    pred = predict(net, images, alpha, beta)
    return iou_report(confusion(pred, gt, net.config.num_classes, ignore))
