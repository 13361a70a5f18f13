"""Detection metrics: IoU matching, precision/recall, AP and mAP over IoU thresholds.

Boxes are ``(cx, cy, w, h)`` tuples in normalized image coordinates.
Evaluation is per class, then macro-averaged over classes that have at
least one ground truth.
"""
from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

IOU_THRESHOLDS: tuple[float, ...] = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
SCHEMES = {"101": 101, "11": 11}
REPORT_FIELDS = ("map50", "map50_95", "precision", "recall")
REPORT_HEADERS = ("mAP50", "mAP50:95", "Precision", "Recall")


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    box: tuple[float, float, float, float]
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")
        if self.box[2] < 0 or self.box[3] < 0:
            raise ValueError(f"negative box size in {self.box}")


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: str
    class_id: int
    box: tuple[float, float, float, float]


@dataclass(frozen=True)
class EvalCounts:
    tp: int
    fp: int
    fn: int

    def __add__(self, other: "EvalCounts") -> "EvalCounts":
        return EvalCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass
class MatchResult:
    flags: list[bool]          # TP flag per detection, input order
    matched_gt: list[int]      # index into gts, -1 for FP
    counts: EvalCounts


def xyxy(box) -> tuple[float, float, float, float]:
    cx, cy, w, h = box
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = xyxy(a)
    bx0, by0, bx1, by1 = xyxy(b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def iou_xyxy(a, b) -> float:
    """IoU of two boxes given as corner tuples ``(x0, y0, x1, y1)``."""
    cx = lambda r: ((r[0] + r[2]) / 2, (r[1] + r[3]) / 2, r[2] - r[0], r[3] - r[1])  # noqa: E731
    return iou(cx(a), cx(b))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between M×4 and K×4 arrays of (cx, cy, w, h) boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    a0, a1 = a[:, :2] - a[:, 2:] / 2, a[:, :2] + a[:, 2:] / 2
    b0, b1 = b[:, :2] - b[:, 2:] / 2, b[:, :2] + b[:, 2:] / 2
    wh = np.clip(np.minimum(a1[:, None], b1[None]) - np.maximum(a0[:, None], b0[None]), 0, None)
    inter = wh[..., 0] * wh[..., 1]
    # areas from corner differences, the same arithmetic as iou(), so both agree bit for bit
    area_a = (a1[:, 0] - a0[:, 0]) * (a1[:, 1] - a0[:, 1])
    area_b = (b1[:, 0] - b0[:, 0]) * (b1[:, 1] - b0[:, 1])
    union = area_a[:, None] + area_b[None] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def score_order(scores: Sequence[float]) -> list[int]:
    """Indices by descending score, ties kept in input order."""
    return sorted(range(len(scores)), key=lambda i: -scores[i])


def _greedy(order: list[int], ious: np.ndarray, threshold: float) -> tuple[list[bool], list[int]]:
    n_det, n_gt = ious.shape
    flags = [False] * n_det
    matched = [-1] * n_det
    taken = np.zeros(n_gt, dtype=bool)
    for d in order:
        if n_gt == 0:
            continue
        row = np.where(taken, -1.0, ious[d])
        j = int(np.argmax(row))
        if not taken[j] and row[j] >= threshold:
            taken[j] = True
            flags[d] = True
            matched[d] = j
    return flags, matched


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                     iou_threshold: float = 0.5) -> MatchResult:
    """Greedy score-ordered matching of detections to same-image, same-class truths.

    A detection is a TP when its highest-IoU still-unmatched truth reaches the
    threshold; that truth is then consumed. Unmatched truths are FNs.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    flags = [False] * len(dets)
    matched = [-1] * len(dets)
    groups_d: dict[tuple, list[int]] = defaultdict(list)
    groups_g: dict[tuple, list[int]] = defaultdict(list)
    for i, d in enumerate(dets):
        groups_d[(d.image_id, d.class_id)].append(i)
    for j, g in enumerate(gts):
        groups_g[(g.image_id, g.class_id)].append(j)
    for key, di in groups_d.items():
        gi = groups_g.get(key, [])
        ious = iou_matrix([dets[i].box for i in di], [gts[j].box for j in gi])
        local_order = score_order([dets[i].score for i in di])
        f, m = _greedy(local_order, ious, iou_threshold)
        for k, i in enumerate(di):
            flags[i] = f[k]
            matched[i] = gi[m[k]] if m[k] >= 0 else -1
    tp = sum(flags)
    return MatchResult(flags, matched, EvalCounts(tp, len(dets) - tp, len(gts) - tp))


def exhaustive_match_oracle(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                            threshold: float = 0.5) -> MatchResult:
    """Reference matcher for tiny instances, written out by the literal rule."""
    if len(dets) > 6 or len(gts) > 6:
        raise ValueError("instance too large for the exhaustive oracle (limit 6 × 6)")
    remaining = list(range(len(dets)))
    used = [False] * len(gts)
    flags = [False] * len(dets)
    matched = [-1] * len(dets)
    while remaining:
        # highest score first; equal scores resolved by lower input index
        best_d = remaining[0]
        for d in remaining[1:]:
            if dets[d].score > dets[best_d].score:
                best_d = d
        remaining.remove(best_d)
        det = dets[best_d]
        best_j, best_v = -1, -1.0
        for j, gt in enumerate(gts):
            if used[j] or gt.image_id != det.image_id or gt.class_id != det.class_id:
                continue
            dx0, dy0 = det.box[0] - det.box[2] / 2, det.box[1] - det.box[3] / 2
            dx1, dy1 = det.box[0] + det.box[2] / 2, det.box[1] + det.box[3] / 2
            gx0, gy0 = gt.box[0] - gt.box[2] / 2, gt.box[1] - gt.box[3] / 2
            gx1, gy1 = gt.box[0] + gt.box[2] / 2, gt.box[1] + gt.box[3] / 2
            w = min(dx1, gx1) - max(dx0, gx0)
            h = min(dy1, gy1) - max(dy0, gy0)
            inter = w * h if w > 0 and h > 0 else 0.0
            union = (dx1 - dx0) * (dy1 - dy0) + (gx1 - gx0) * (gy1 - gy0) - inter
            v = inter / union if union > 0 else 0.0
            if v > best_v:
                best_j, best_v = j, v
        if best_j >= 0 and best_v >= threshold:
            used[best_j] = True
            flags[best_d] = True
            matched[best_d] = best_j
    tp = sum(flags)
    return MatchResult(flags, matched, EvalCounts(tp, len(dets) - tp, len(gts) - tp))


def precision(counts: EvalCounts) -> float:
    """TP / (TP + FP); 0 when nothing was predicted."""
    denom = counts.tp + counts.fp
    return counts.tp / denom if denom else 0.0


def recall(counts: EvalCounts) -> float:
    """TP / (TP + FN); 0 when there is nothing to find."""
    denom = counts.tp + counts.fn
    return counts.tp / denom if denom else 0.0


def pr_curve(scores: Sequence[float], flags: Sequence[bool], n_gt: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Recall and precision after each score-ranked detection."""
    order = score_order(list(scores))
    tp = np.cumsum([1 if flags[i] else 0 for i in order], dtype=np.float64)
    ranks = np.arange(1, len(order) + 1, dtype=np.float64)
    rec = tp / n_gt if n_gt else np.zeros_like(tp)
    prec = tp / ranks if len(order) else tp
    return np.array([scores[i] for i in order], dtype=np.float64), rec, prec


def average_precision(scores: Sequence[float], flags: Sequence[bool], n_gt: int, scheme: str = "101") -> float:
    """Interpolated AP: monotone precision envelope sampled at evenly spaced recalls."""
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {sorted(SCHEMES)}, got {scheme!r}")
    if n_gt <= 0 or len(scores) == 0:
        return 0.0
    _, rec, prec = pr_curve(scores, flags, n_gt)
    env = np.maximum.accumulate(prec[::-1])[::-1]
    points = np.linspace(0.0, 1.0, SCHEMES[scheme])
    # tolerance so a recall of exactly k/n is not missed by linspace roundoff (0.6000000000000001)
    idx = np.searchsorted(rec, points - 1e-12, side="left")
    sampled = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(sampled.mean())


@dataclass
class MapResult:
    map50: float
    map50_95: float
    per_class: dict[int, dict[float, float]]
    thresholds: tuple[float, ...]
    flags_at: dict[float, list[bool]] = field(repr=False, default_factory=dict)


def map_range(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
              thresholds: Sequence[float] = IOU_THRESHOLDS, scheme: str = "101",
              classes: Iterable[int] | None = None) -> MapResult:
    """AP per class per IoU threshold; mAP at the first threshold and over all."""
    thresholds = tuple(thresholds)
    cls_set = sorted(set(classes) if classes is not None else {g.class_id for g in gts})
    n_gt = defaultdict(int)
    for g in gts:
        n_gt[g.class_id] += 1
    flags_at = {t: match_detections(dets, gts, t).flags for t in thresholds}
    by_class: dict[int, list[int]] = defaultdict(list)
    for i, d in enumerate(dets):
        by_class[d.class_id].append(i)
    per_class: dict[int, dict[float, float]] = {}
    for c in cls_set:
        if n_gt[c] == 0:
            continue
        idx = by_class.get(c, [])
        scores = [dets[i].score for i in idx]
        per_class[c] = {t: average_precision(scores, [flags_at[t][i] for i in idx], n_gt[c], scheme)
                        for t in thresholds}
    if not per_class:
        return MapResult(0.0, 0.0, {}, thresholds, flags_at)
    map50 = float(np.mean([ap[thresholds[0]] for ap in per_class.values()]))
    map_all = float(np.mean([v for ap in per_class.values() for v in ap.values()]))
    return MapResult(map50, map_all, per_class, thresholds, flags_at)


@dataclass
class EvalReport:
    map50: float
    map50_95: float
    precision: float
    recall: float
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)
    precision_best_f1: float = 0.0
    recall_best_f1: float = 0.0
    best_f1_threshold: float = 0.0
    conf_threshold: float = 0.25
    iou_threshold: float = 0.5
    scheme: str = "101"
    counts: dict[str, int] = field(default_factory=dict)
    degenerate: list[str] = field(default_factory=list)
    name: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["per_class"] = {int(k): v for k, v in d.get("per_class", {}).items()}
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})

    def row(self, label: str | None = None) -> str:
        vals = "  ".join(f"{getattr(self, f):>9.3f}" for f in REPORT_FIELDS)
        return f"{(label or self.name or '-'):<16}{vals}"


def table_header() -> str:
    return f"{'Model':<16}" + "  ".join(f"{h:>9}" for h in REPORT_HEADERS)


def evaluate(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], scheme: str = "101",
             iou_threshold: float = 0.5, conf_threshold: float = 0.25,
             classes: Iterable[int] | None = None, name: str = "") -> EvalReport:
    """Full metric suite for one run.

    ``precision``/``recall`` pool counts over classes at ``iou_threshold`` for
    detections scoring at least ``conf_threshold``; the ``*_best_f1`` fields
    give the pooled operating point with the highest F1.
    """
    res = map_range(dets, gts, IOU_THRESHOLDS, scheme, classes)
    match = match_detections(dets, gts, iou_threshold)
    kept = [i for i, d in enumerate(dets) if d.score >= conf_threshold]
    tp = sum(match.flags[i] for i in kept)
    counts = EvalCounts(tp, len(kept) - tp, len(gts) - tp)
    degenerate = []
    if counts.tp + counts.fp == 0:
        degenerate.append("precision")
    if counts.tp + counts.fn == 0:
        degenerate.append("recall")

    best = (0.0, 0.0, 0.0, 0.0)  # f1, p, r, score
    if dets and gts:
        s_sorted, rec, prec = pr_curve([d.score for d in dets], match.flags, len(gts))
        f1 = np.where(prec + rec > 0, 2 * prec * rec / np.where(prec + rec > 0, prec + rec, 1), 0)
        # only evaluate at score boundaries so every tied detection is included
        last_of_tie = np.r_[s_sorted[1:] != s_sorted[:-1], True]
        f1 = np.where(last_of_tie, f1, -1)
        k = int(np.argmax(f1))
        if f1[k] > 0:
            best = (float(f1[k]), float(prec[k]), float(rec[k]), float(s_sorted[k]))

    per_class = {c: {"ap50": ap[IOU_THRESHOLDS[0]], "ap50_95": float(np.mean(list(ap.values())))}
                 for c, ap in res.per_class.items()}
    return EvalReport(
        map50=res.map50, map50_95=res.map50_95,
        precision=precision(counts), recall=recall(counts), per_class=per_class,
        precision_best_f1=best[1], recall_best_f1=best[2], best_f1_threshold=best[3],
        conf_threshold=conf_threshold, iou_threshold=iou_threshold, scheme=scheme,
        counts={"tp": counts.tp, "fp": counts.fp, "fn": counts.fn},
        degenerate=degenerate, name=name)


# -- report comparison ----------------------------------------------------------

@dataclass
class ReportDelta:
    a: EvalReport
    b: EvalReport
    deltas: dict[str, float]

    def render(self, label_a: str = "A", label_b: str = "B") -> str:
        lines = [table_header(), self.a.row(label_a), self.b.row(label_b)]
        lines.append(f"{'Delta (B - A)':<16}" + "  ".join(f"{fmt_delta(self.deltas[f]):>9}" for f in REPORT_FIELDS))
        return "\n".join(lines)


def fmt_delta(d: float) -> str:
    return f"{round(d, 3) + 0.0:+.3f}"


def compare_reports(a: EvalReport, b: EvalReport) -> ReportDelta:
    """Fieldwise ``b - a`` for the Table-style metric columns."""
    if a.per_class and b.per_class and set(a.per_class) != set(b.per_class):
        raise ValueError(f"class sets differ: {sorted(a.per_class)} vs {sorted(b.per_class)}")
    return ReportDelta(a, b, {f: getattr(b, f) - getattr(a, f) for f in REPORT_FIELDS})


# -- file formats -----------------------------------------------------------------

def save_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def write_detections(dets: Iterable[Detection]) -> str:
    return "".join(f"{d.image_id} {d.class_id} {d.score:.6f} {d.box[0]:.6f} {d.box[1]:.6f} "
                   f"{d.box[2]:.6f} {d.box[3]:.6f}\n" for d in dets)


def parse_detections(text: str) -> list[Detection]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        f = line.split()
        if not f:
            continue
        if len(f) != 7:
            raise ValueError(f"line {lineno}: expected 7 fields, got {len(f)}")
        try:
            out.append(Detection(f[0], int(f[1]), tuple(float(v) for v in f[3:]), float(f[2])))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return out


def pr_points_csv(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                  thresholds: Sequence[float] = IOU_THRESHOLDS) -> str:
    """CSV of PR points (class, iou_threshold, rank, score, recall, precision)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "iou_threshold", "rank", "score", "recall", "precision"])
    n_gt = defaultdict(int)
    for g in gts:
        n_gt[g.class_id] += 1
    for t in thresholds:
        flags = match_detections(dets, gts, t).flags
        for c in sorted(n_gt):
            idx = [i for i, d in enumerate(dets) if d.class_id == c]
            s, rec, prec = pr_curve([dets[i].score for i in idx], [flags[i] for i in idx], n_gt[c])
            for r, (sc, rc, pc) in enumerate(zip(s, rec, prec), start=1):
                w.writerow([c, f"{t:.2f}", r, f"{sc:.6f}", f"{rc:.6f}", f"{pc:.6f}"])
    return buf.getvalue()


def pr_curve_svg(recall_pts: Sequence[float], precision_pts: Sequence[float], title: str = "") -> str:
    """Minimal standalone SVG line plot of a PR curve on the unit square."""
    size, pad = 300, 40
    sx = lambda r: pad + r * (size - 2 * pad)  # noqa: E731
    sy = lambda p: size - pad - p * (size - 2 * pad)  # noqa: E731
    pts = " ".join(f"{sx(r):.2f},{sy(p):.2f}" for r, p in zip(recall_pts, precision_pts))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">\n'
        f'<rect x="{pad}" y="{pad}" width="{size - 2 * pad}" height="{size - 2 * pad}" fill="none" stroke="black"/>\n'
        f'<text x="{size / 2}" y="{pad / 2}" text-anchor="middle" font-size="12">{title}</text>\n'
        f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="11">recall</text>\n'
        f'<text x="12" y="{size / 2}" font-size="11" transform="rotate(-90 12 {size / 2})">precision</text>\n'
        f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{pts}"/>\n'
        "</svg>\n")


def is_finite_report(report: EvalReport) -> bool:
    return all(math.isfinite(getattr(report, f)) for f in REPORT_FIELDS)
