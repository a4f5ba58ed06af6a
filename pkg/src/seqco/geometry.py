"""Normalized (cx, cy, w, h) boxes: IoU, generalized IoU and the matching box distance.

Plain functions work on array-likes of shape (..., 4) in float64. The ``*_t``
variants take ``numcore`` tensors so they can sit inside a loss.
"""
from __future__ import annotations

import numpy as np

from . import numcore as nc

# L_box = L1 + GIOU_WEIGHT * (1 - GIoU); with the outer weight 5 this gives 5*L1 + 2*(1 - GIoU)
GIOU_WEIGHT = 0.4


def to_corners(boxes, clamp: bool = False) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(b, -1, 0)
    out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)
    return np.clip(out, 0.0, 1.0) if clamp else out


def to_cxcywh(corners) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64)
    x1, y1, x2, y2 = np.moveaxis(c, -1, 0)
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def _iou_and_union(a: np.ndarray, b: np.ndarray):
    ca, cb = to_corners(a), to_corners(b)
    area_a = np.clip(ca[..., 2] - ca[..., 0], 0, None) * np.clip(ca[..., 3] - ca[..., 1], 0, None)
    area_b = np.clip(cb[..., 2] - cb[..., 0], 0, None) * np.clip(cb[..., 3] - cb[..., 1], 0, None)
    iw = np.clip(np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0]), 0, None)
    ih = np.clip(np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return iou, union, ca, cb


def iou(a, b) -> np.ndarray | float:
    """IoU of broadcastable box arrays; degenerate boxes give 0."""
    out, *_ = _iou_and_union(np.asarray(a, np.float64), np.asarray(b, np.float64))
    return float(out) if out.ndim == 0 else out


def giou(a, b) -> np.ndarray | float:
    out = _giou(np.asarray(a, np.float64), np.asarray(b, np.float64))
    return float(out) if out.ndim == 0 else out


def _giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    iou_, union, ca, cb = _iou_and_union(a, b)
    ew = np.maximum(ca[..., 2], cb[..., 2]) - np.minimum(ca[..., 0], cb[..., 0])
    eh = np.maximum(ca[..., 3], cb[..., 3]) - np.minimum(ca[..., 1], cb[..., 1])
    enclose = ew * eh
    with np.errstate(invalid="ignore", divide="ignore"):
        penalty = np.where(enclose > 0, (enclose - union) / np.where(enclose > 0, enclose, 1), 0.0)
    return iou_ - penalty


def box_distance(a, b) -> np.ndarray | float:
    """L1 over the four coordinates plus GIOU_WEIGHT * (1 - GIoU)."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    out = np.abs(a - b).sum(axis=-1) + GIOU_WEIGHT * (1.0 - _giou(a, b))
    return float(out) if out.ndim == 0 else out


def pairwise_iou(a, b) -> np.ndarray:
    a = np.asarray(a, np.float64).reshape(-1, 4)
    b = np.asarray(b, np.float64).reshape(-1, 4)
    return np.asarray(iou(a[:, None, :], b[None, :, :])).reshape(len(a), len(b))


def pairwise_box_distance(a, b) -> np.ndarray:
    """(N, 4) x (M, 4) -> (N, M) matrix of box_distance."""
    a = np.asarray(a, np.float64).reshape(-1, 4)
    b = np.asarray(b, np.float64).reshape(-1, 4)
    return np.asarray(box_distance(a[:, None, :], b[None, :, :])).reshape(len(a), len(b))


# ---------------------------------------------------------------- differentiable

def giou_t(pred: nc.Tensor, target) -> nc.Tensor:
    """Row-wise GIoU of (K, 4) predictions against (K, 4) targets."""
    target = nc.as_tensor(target, like=pred)
    px1, py1, px2, py2 = _corners_t(pred)
    tx1, ty1, tx2, ty2 = _corners_t(target)
    area_p = (px2 - px1) * (py2 - py1)
    area_t = (tx2 - tx1) * (ty2 - ty1)
    iw = nc.clip(nc.minimum(px2, tx2) - nc.maximum(px1, tx1), lo=0.0)
    ih = nc.clip(nc.minimum(py2, ty2) - nc.maximum(py1, ty1), lo=0.0)
    inter = iw * ih
    union = area_p + area_t - inter
    ew = nc.maximum(px2, tx2) - nc.minimum(px1, tx1)
    eh = nc.maximum(py2, ty2) - nc.minimum(py1, ty1)
    enclose = ew * eh
    # eps keeps untrained, collapsed boxes finite; it is far below any real area
    eps = 1e-12
    return inter / (union + eps) - (enclose - union) / (enclose + eps)


def _corners_t(b: nc.Tensor):
    cx, cy, w, h = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5


def box_distance_t(pred: nc.Tensor, target) -> nc.Tensor:
    target = nc.as_tensor(target, like=pred)
    l1 = nc.abs_(pred - target).sum(axis=-1)
    return l1 + (1.0 - giou_t(pred, target)) * GIOU_WEIGHT
