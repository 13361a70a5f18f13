"""Matching, AP and report deltas on hand-sized inputs.

Run: python3 demos/02_metrics_walkthrough.py
"""
from pathlib import Path

from scconvdet.metrics import (
    Detection, GroundTruthBox, average_precision, compare_reports,
    evaluate, load_report, match_detections,
)

gts = [GroundTruthBox("img0", 0, (0.3, 0.3, 0.2, 0.2)),
       GroundTruthBox("img0", 0, (0.7, 0.7, 0.2, 0.2))]
dets = [Detection("img0", 0, (0.31, 0.30, 0.2, 0.2), 0.9),   # hits the first box
        Detection("img0", 0, (0.30, 0.31, 0.2, 0.2), 0.8),   # duplicate, so a false positive
        Detection("img0", 0, (0.70, 0.69, 0.2, 0.2), 0.7)]

m = match_detections(dets, gts, 0.5)
print("TP flags:", m.flags, "counts:", m.counts)

scores = [d.score for d in dets]
for scheme in ("101", "11"):
    print(f"AP ({scheme}-point):", round(average_precision(scores, m.flags, len(gts), scheme), 4))

rep = evaluate(dets, gts, name="toy")
print("mAP50", round(rep.map50, 4), "mAP50:95", round(rep.map50_95, 4))

# Table-style comparison using the fixture reports shipped with the tests
fx = Path(__file__).resolve().parent.parent / "tests" / "fixtures"
d = compare_reports(load_report(fx / "table3_yolov9.json"), load_report(fx / "table3_scc_yolo.json"))
print(d.render("baseline", "with-scconv"))
