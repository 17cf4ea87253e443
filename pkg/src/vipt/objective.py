"""Training objective: penalty-reduced focal loss plus GIoU and L1 box terms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import LossWeights
from .foundation import BoxPrediction
from .tensor import Tensor

FOCAL_ALPHA = 2.0
FOCAL_GAMMA = 4.0
PROB_EPS = 1e-6
_TINY = 1e-12


@dataclass
class GtTarget:
    box_gt: tuple[float, float, float, float]  # cx, cy, w, h normalised
    cls_target: np.ndarray  # [1, S, S]
    peak: tuple[int, int]  # (row, col) of the unit cell


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """CenterNet heatmap radius for a box of the given size (in grid cells)."""
    a1, b1 = 1.0, height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 * b1 - 4 * a1 * c1)) / 2
    a2, b2 = 4.0, 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 * b2 - 4 * a2 * c2)) / 2
    a3, b3 = 4 * min_overlap, -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 * b3 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def make_target(box_gt, grid: int) -> GtTarget:
    cx, cy, w, h = (float(v) for v in box_gt)
    col = min(int(cx * grid), grid - 1)
    row = min(int(cy * grid), grid - 1)
    radius = max(0, int(gaussian_radius(h * grid, w * grid)))
    sigma = (2 * radius + 1) / 6.0
    yy, xx = np.mgrid[0:grid, 0:grid]
    dist2 = (yy - row) ** 2 + (xx - col) ** 2
    heat = np.exp(-dist2 / (2 * sigma * sigma))
    window = (np.abs(yy - row) <= radius) & (np.abs(xx - col) <= radius)
    heat = np.where(window, heat, 0.0)
    heat[heat < np.finfo(np.float64).eps] = 0.0
    heat[row, col] = 1.0
    return GtTarget((cx, cy, w, h), heat[None], (row, col))


def focal_loss(cls_map, cls_target) -> Tensor:
    """Penalty-reduced focal loss, normalised by the number of unit cells."""
    y = cls_target.data if isinstance(cls_target, Tensor) else np.asarray(cls_target, dtype=np.float64)
    if y.min() < 0 or y.max() > 1:
        raise ValueError("focal_loss: target values must lie in [0, 1]")
    p = T.clip(T.as_tensor(cls_map), PROB_EPS, 1.0 - PROB_EPS)
    pos = (y == 1.0).astype(np.float64)
    neg_w = (1.0 - pos) * (1.0 - y) ** FOCAL_GAMMA
    pos_term = (1.0 - p) ** FOCAL_ALPHA * T.log(p) * pos
    neg_term = p**FOCAL_ALPHA * T.log(1.0 - p) * neg_w
    num_pos = max(pos.sum(), 1.0)
    return -(pos_term + neg_term).sum() * (1.0 / num_pos)


def cxcywh_to_xyxy(box) -> Tensor:
    box = T.as_tensor(box)
    c, half = box[:2], box[2:] * 0.5
    return T.concat([c - half, c + half])


def giou_loss(box_a, box_b, fmt: str = "xyxy") -> Tensor:
    """``1 - GIoU``; zero-area boxes give IoU 0 instead of NaN."""
    a, b = T.as_tensor(box_a), T.as_tensor(box_b)
    if fmt == "cxcywh":
        a, b = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    elif fmt != "xyxy":
        raise ValueError(f"unknown box format {fmt!r}")
    wh = T.maximum(T.minimum(a[2:], b[2:]) - T.maximum(a[:2], b[:2]), 0.0)
    inter = wh[0] * wh[1]
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    iou = inter / T.maximum(union, _TINY)
    hull_wh = T.maximum(a[2:], b[2:]) - T.minimum(a[:2], b[:2])
    hull = hull_wh[0] * hull_wh[1]
    giou = iou - (hull - union) / T.maximum(hull, _TINY)
    return 1.0 - giou


def l1_loss(box_a, box_b) -> Tensor:
    return T.mean(T.absolute(T.as_tensor(box_a) - T.as_tensor(box_b)))


def box_at_peak(pred: BoxPrediction, peak: tuple[int, int]) -> Tensor:
    """Train-time decode at the ground-truth cell: ``[cx, cy, w, h]``."""
    row, col = peak
    s = pred.cls_map.shape[-1]
    center = (pred.offset_map[:, row, col] + np.array([col, row], dtype=np.float64)) * (1.0 / s)
    return T.concat([center, pred.size_map[:, row, col]])


def loss_terms(pred: BoxPrediction, gt: GtTarget, weights: LossWeights) -> dict[str, Tensor]:
    box = box_at_peak(pred, gt.peak)
    gt_box = np.asarray(gt.box_gt, dtype=np.float64)
    cls = focal_loss(pred.cls_map, gt.cls_target)
    iou = giou_loss(box, gt_box, fmt="cxcywh")
    l1 = l1_loss(box, gt_box)
    total = cls + weights.lambda_iou * iou + weights.lambda_l1 * l1
    return {"total": total, "cls": cls, "iou": iou, "l1": l1}


def total_loss(pred: BoxPrediction, gt: GtTarget, weights: LossWeights) -> Tensor:
    return loss_terms(pred, gt, weights)["total"]
