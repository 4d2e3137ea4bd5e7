"""Dense single-anchor detection: objectness + box regression per cell.

One 1x1 conv produces 5 channels (objectness logit, dx, dy, log w, log h
against a fixed 4 m x 2 m prior at each cell center). Classification is
binary focal loss, regression smooth-L1 on positive cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, ShapeError
from .scene import GridSpec

PRIOR_W = 4.0
PRIOR_H = 2.0
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25


@dataclass
class DensePrediction:
    objectness: Tensor    # [H, W] logits
    box_deltas: Tensor    # [4, H, W]: dx, dy, log w, log h


class DetectionHead:
    """1x1 conv feature -> 5 channels; the ego head stays frozen after pretraining."""

    def __init__(self, name: str, in_channels: int, frozen: bool = False):
        self.in_channels = in_channels
        self.weight = Parameter(f"{name}.w", np.zeros((5, in_channels)), frozen=frozen)
        self.bias = Parameter(f"{name}.b", np.zeros(5), frozen=frozen)

    def parameters(self):
        return [self.weight, self.bias]

    def set_frozen(self, frozen: bool):
        self.weight.frozen = frozen
        self.bias.frozen = frozen


def head_forward(head: DetectionHead, feature) -> DensePrediction:
    """feature: Tensor [C,H,W] or BevFeature; channel count must match the head."""
    t = feature.data if hasattr(feature, "encoder_id") else feature
    t = ad.as_tensor(t)
    if t.shape[0] != head.in_channels:
        raise ShapeError(
            f"head expects {head.in_channels} channels, feature has {t.shape[0]}"
        )
    out = ad.conv1x1(t, head.weight, head.bias)          # [5, H, W]
    _, h, w = t.shape
    obj = ad.reshape(ad.slice_axis(out, 0, 0, 1), (h, w))
    deltas = ad.slice_axis(out, 0, 1, 5)
    return DensePrediction(objectness=obj, box_deltas=deltas)


def encode_targets(boxes: np.ndarray, grid: GridSpec):
    """Per-cell positive mask and delta targets for cells inside a GT box."""
    h, w = grid.height_cells, grid.width_cells
    cx, cy = grid.cell_centers()                          # [H, W] each
    pos = np.zeros((h, w), dtype=bool)
    deltas = np.zeros((4, h, w), dtype=np.float64)
    for bx, by, bw, bh in np.asarray(boxes).reshape(-1, 4):
        inside = (
            (cx >= bx - bw / 2) & (cx < bx + bw / 2)
            & (cy >= by - bh / 2) & (cy < by + bh / 2)
        )
        fresh = inside & ~pos
        pos |= inside
        deltas[0][fresh] = (bx - cx[fresh]) / PRIOR_W
        deltas[1][fresh] = (by - cy[fresh]) / PRIOR_H
        deltas[2][fresh] = np.log(bw / PRIOR_W)
        deltas[3][fresh] = np.log(bh / PRIOR_H)
    return pos, deltas


def decode_cell(row: int, col: int, delta: np.ndarray, grid: GridSpec):
    """Invert encode_targets for one cell; exact to float precision."""
    x0, y0 = grid.origin
    ccx = x0 + (col + 0.5) * grid.cell_size
    ccy = y0 + (row + 0.5) * grid.cell_size
    cx = ccx + delta[0] * PRIOR_W
    cy = ccy + delta[1] * PRIOR_H
    return np.array([cx, cy, PRIOR_W * np.exp(delta[2]), PRIOR_H * np.exp(delta[3])])


def detection_loss(pred: DensePrediction, boxes, grid: GridSpec) -> Tensor:
    """Focal classification over all cells + smooth-L1 regression on positives.

    Both terms are normalized by the positive count (floor 1); regression is
    zero when no cell is positive.
    """
    pos, target = encode_targets(boxes, grid)
    n_pos = max(1, int(pos.sum()))
    z = pred.objectness
    p = ad.sigmoid(z)
    pos_t = Tensor(pos.astype(np.float64))
    neg_t = Tensor((~pos).astype(np.float64))
    # -log(sigmoid(z)) == softplus(-z); -log(1-sigmoid(z)) == softplus(z)
    pos_term = ad.pow_const(Tensor(1.0) - p, FOCAL_GAMMA) * softplus_neg(z)
    neg_term = ad.pow_const(p, FOCAL_GAMMA) * ad.softplus(z)
    cls = ad.tsum(pos_t * pos_term) * FOCAL_ALPHA + ad.tsum(neg_t * neg_term) * (1 - FOCAL_ALPHA)
    cls = ad.scale(cls, 1.0 / n_pos)
    diff = (pred.box_deltas - Tensor(target)) * Tensor(pos.astype(np.float64)[None])
    reg = ad.scale(ad.tsum(ad.smooth_l1(diff)), 1.0 / n_pos)
    return cls + reg


def softplus_neg(z):
    return ad.softplus(ad.neg(z))


def iou_xywh(a, b) -> float:
    """IoU of two (cx, cy, w, h) boxes."""
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise ValueError("degenerate box")
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by0, by1 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union


def decode_boxes(pred: DensePrediction, grid: GridSpec,
                 conf_threshold: float = 0.3, nms_iou: float = 0.5):
    """Threshold, decode, then greedy NMS; ties broken by (row, col)."""
    if not 0.0 < conf_threshold < 1.0:
        raise ValueError("conf_threshold must lie in (0, 1)")
    scores = ad.sigmoid_np(pred.objectness.data)
    deltas = pred.box_deltas.data
    rows, cols = np.nonzero(scores > conf_threshold)
    cands = []
    for r, c in zip(rows, cols):
        cands.append((float(scores[r, c]), int(r), int(c),
                      decode_cell(r, c, deltas[:, r, c], grid)))
    cands.sort(key=lambda t: (-t[0], t[1], t[2]))
    kept = []
    for score, _, _, box in cands:
        if all(iou_xywh(box, kb) <= nms_iou for kb, _ in kept):
            kept.append((box, score))
    return kept
