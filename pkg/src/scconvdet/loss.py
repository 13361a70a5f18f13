"""Target assignment, CIoU box loss and the combined detection loss."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, arctan, as_tensor, bce_with_logits, detach, maximum, minimum, sigmoid

_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    box: float = 1.0
    obj: float = 1.0
    cls: float = 0.5


@dataclass
class Assignment:
    """Per-cell training targets for a batch on a G×G grid."""

    objectness: np.ndarray   # N×G×G, 1.0 at positive cells
    boxes: np.ndarray        # N×G×G×4 target (cx, cy, w, h)
    classes: np.ndarray      # N×G×G int, -1 where negative

    @property
    def positive(self) -> np.ndarray:
        return self.objectness > 0

    @property
    def num_positive(self) -> int:
        return int(self.objectness.sum())


def _cols(x: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    return x[..., 0], x[..., 1], x[..., 2], x[..., 3]


def ciou_loss(pred, target) -> Tensor:
    """Complete-IoU loss per box, ``1 - IoU + rho^2/c^2 + alpha * v``.

    ``pred`` and ``target`` hold ``(cx, cy, w, h)`` along the last axis.
    ``alpha`` is a stop-gradient weight. Pairs whose enclosing box has zero
    diagonal (two zero-size boxes at one point) get loss 0.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    pcx, pcy, pw, ph = _cols(pred)
    tcx, tcy, tw, th = _cols(target)
    px0, px1, py0, py1 = pcx - pw * 0.5, pcx + pw * 0.5, pcy - ph * 0.5, pcy + ph * 0.5
    tx0, tx1, ty0, ty1 = tcx - tw * 0.5, tcx + tw * 0.5, tcy - th * 0.5, tcy + th * 0.5

    iw = maximum(minimum(px1, tx1) - maximum(px0, tx0), 0.0)
    ih = maximum(minimum(py1, ty1) - maximum(py0, ty0), 0.0)
    inter = iw * ih
    # areas from corner differences so identical boxes give IoU exactly 1
    union = (px1 - px0) * (py1 - py0) + (tx1 - tx0) * (ty1 - ty0) - inter
    iou = inter / maximum(union, _EPS)

    cw = maximum(px1, tx1) - minimum(px0, tx0)
    ch = maximum(py1, ty1) - minimum(py0, ty0)
    c2 = cw * cw + ch * ch
    rho2 = (pcx - tcx) ** 2 + (pcy - tcy) ** 2
    valid = (c2.data > 0).astype(np.float64)

    v = (4.0 / math.pi**2) * (arctan(tw / maximum(th, _EPS)) - arctan(pw / maximum(ph, _EPS))) ** 2
    v_d, iou_d = detach(v), detach(iou)
    denom = (1.0 - iou_d.data) + v_d.data
    alpha = Tensor(np.where(denom > 0, v_d.data / np.where(denom > 0, denom, 1.0), 0.0))

    loss = (1.0 - iou) + rho2 / maximum(c2, _EPS) + alpha * v
    return loss * valid


def grid_cell(cx: float, cy: float, grid: int) -> tuple[int, int]:
    """(row, col) of the cell containing a normalized centre."""
    return min(int(math.floor(cy * grid)), grid - 1), min(int(math.floor(cx * grid)), grid - 1)


def assign_targets(grid: int, gts: Sequence[Sequence]) -> Assignment:
    """Assign each image's boxes to the cell holding their centre.

    ``gts[n]`` is an iterable of ``(class_id, (cx, cy, w, h))`` pairs (or
    objects with ``class_id``/``box``). One box per cell: larger area wins,
    then lower class id.
    """
    n = len(gts)
    obj = np.zeros((n, grid, grid))
    boxes = np.zeros((n, grid, grid, 4))
    classes = np.full((n, grid, grid), -1, dtype=np.int64)
    for b, items in enumerate(gts):
        best: dict[tuple[int, int], tuple[float, int, tuple]] = {}
        for item in items:
            cls, box = (item.class_id, item.box) if hasattr(item, "class_id") else item
            cell = grid_cell(box[0], box[1], grid)
            key = (-box[2] * box[3], int(cls))
            if cell not in best or key < best[cell][:2]:
                best[cell] = (key[0], key[1], tuple(box))
        for (r, c), (_, cls, box) in best.items():
            obj[b, r, c] = 1.0
            boxes[b, r, c] = box
            classes[b, r, c] = cls
    return Assignment(obj, boxes, classes)


def decode_boxes(raw: Tensor, rows: np.ndarray, cols: np.ndarray, grid: int) -> Tensor:
    """Map raw (tx, ty, tw, th) rows (P×4) to normalized (cx, cy, w, h)."""
    s = sigmoid(raw)
    offs = np.stack([cols, rows, np.zeros_like(cols), np.zeros_like(rows)], axis=1).astype(np.float64)
    scale = np.array([1.0 / grid, 1.0 / grid, 1.0, 1.0])
    return (s + offs) * scale


def detection_loss(preds: Tensor, assign: Assignment, weights: LossWeights = LossWeights()) -> Tensor:
    """Weighted CIoU (positives) + objectness BCE (all cells) + class BCE (positives)."""
    n, ch, g, _ = preds.shape
    num_classes = ch - 5
    loss = bce_with_logits(preds[:, 4], assign.objectness).mean() * weights.obj
    bi, ri, ci = np.nonzero(assign.positive)
    if bi.size == 0:
        return loss
    raw = preds[bi, 0:4, ri, ci]               # P×4
    boxes = decode_boxes(raw, ri, ci, g)
    box_term = ciou_loss(boxes, assign.boxes[bi, ri, ci]).mean()
    onehot = np.zeros((bi.size, num_classes))
    onehot[np.arange(bi.size), assign.classes[bi, ri, ci]] = 1.0
    cls_term = bce_with_logits(preds[bi, 5:, ri, ci], onehot).mean()
    return loss + box_term * weights.box + cls_term * weights.cls
