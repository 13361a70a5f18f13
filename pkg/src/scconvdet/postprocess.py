"""Turning raw head outputs into scored boxes, and greedy NMS."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .metrics import Detection, iou_matrix, score_order
from .tensor import _sigmoid_np


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5, score_threshold: float = 0.0) -> list[Detection]:
    """Greedy same-class suppression.

    Boxes below ``score_threshold`` are dropped first; survivors are visited by
    descending score (ties by input order) and kept when their IoU with every
    kept box of the same class is below ``iou_threshold``.
    """
    cand = [d for d in dets if d.score >= score_threshold]
    order = score_order([d.score for d in cand])
    kept: list[Detection] = []
    kept_by_key: dict[tuple, list[tuple]] = {}
    for i in order:
        d = cand[i]
        key = (d.image_id, d.class_id)
        prior = kept_by_key.setdefault(key, [])
        if prior and iou_matrix([d.box], prior).max() >= iou_threshold:
            continue
        prior.append(d.box)
        kept.append(d)
    return kept


def decode_predictions(preds: np.ndarray, image_ids: Sequence[str], score_threshold: float = 0.001,
                       iou_threshold: float = 0.5, max_per_image: int = 100) -> list[Detection]:
    """Per-cell, per-class detections with score = objectness × class probability."""
    n, ch, g, _ = preds.shape
    rows, cols = np.mgrid[0:g, 0:g]
    out: list[Detection] = []
    for b in range(n):
        p = preds[b]
        s = _sigmoid_np(p[:4])
        cx = (s[0] + cols) / g
        cy = (s[1] + rows) / g
        w, h = s[2], s[3]
        obj = _sigmoid_np(p[4])
        cls = _sigmoid_np(p[5:])
        scores = obj[None] * cls                 # C×G×G
        cand = []
        for c, r, q in zip(*np.nonzero(scores >= score_threshold)):
            cand.append(Detection(image_ids[b], int(c), (float(cx[r, q]), float(cy[r, q]),
                                                         float(w[r, q]), float(h[r, q])), float(scores[c, r, q])))
        kept = nms(cand, iou_threshold)
        out.extend(kept[:max_per_image])
    return out
