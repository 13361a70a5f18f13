from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scconvdet.metrics import (
    IOU_THRESHOLDS,
    Detection,
    EvalCounts,
    EvalReport,
    GroundTruthBox,
    average_precision,
    compare_reports,
    evaluate,
    exhaustive_match_oracle,
    fmt_delta,
    iou,
    iou_matrix,
    iou_xyxy,
    load_report,
    map_range,
    match_detections,
    parse_detections,
    pr_curve_svg,
    pr_points_csv,
    precision,
    recall,
    save_report,
    write_detections,
)

from .oracles import ap_by_hand, box_iou


def det(img, c, box, s):
    return Detection(img, c, box, s)


def gt(img, c, box):
    return GroundTruthBox(img, c, box)


# -- IoU ------------------------------------------------------------------------------------

def test_iou_examples():
    assert iou((0.5, 0.5, 0.2, 0.2), (0.5, 0.5, 0.2, 0.2)) == 1.0
    assert iou((0.2, 0.2, 0.1, 0.1), (0.8, 0.8, 0.1, 0.1)) == 0.0
    assert iou_xyxy((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3, rel=1e-15)
    assert iou((0.5, 0.5, 0.0, 0.0), (0.5, 0.5, 0.0, 0.0)) == 0.0


boxes = st.tuples(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.01, 0.5), st.floats(0.01, 0.5))


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_iou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a), abs=1e-15)
    assert v == pytest.approx(box_iou(a, b), abs=1e-12)
    assert iou(a, a) == pytest.approx(1.0, abs=1e-12)


# -- matching ----------------------------------------------------------------------------------

def test_match_examples():
    g = [gt("i", 0, (0.5, 0.5, 0.2, 0.2))]
    r = match_detections([det("i", 0, (0.5, 0.5, 0.2, 0.19), 0.9)], g)
    assert (r.counts.tp, r.counts.fp, r.counts.fn) == (1, 0, 0)
    # IoU = 0.4: same centre, width 0.08 vs 0.2
    r = match_detections([det("i", 0, (0.5, 0.5, 0.08, 0.2), 0.9)], g)
    assert (r.counts.tp, r.counts.fp, r.counts.fn) == (0, 1, 1)
    r = exhaustive_match_oracle([], g)
    assert (r.counts.tp, r.counts.fp, r.counts.fn) == (0, 0, 1)


def test_match_requires_same_class_and_image():
    g = [gt("a", 0, (0.5, 0.5, 0.2, 0.2))]
    r = match_detections([det("a", 1, (0.5, 0.5, 0.2, 0.2), 0.9), det("b", 0, (0.5, 0.5, 0.2, 0.2), 0.8)], g)
    assert r.flags == [False, False]


def test_score_ties_by_input_order():
    g = [gt("i", 0, (0.5, 0.5, 0.2, 0.2))]
    d = [det("i", 0, (0.5, 0.5, 0.2, 0.18), 0.5), det("i", 0, (0.5, 0.5, 0.2, 0.2), 0.5)]
    assert match_detections(d, g).flags == [True, False]


def test_oracle_rejects_large_instances():
    with pytest.raises(ValueError, match="too large"):
        exhaustive_match_oracle([det("i", 0, (0.5, 0.5, 0.1, 0.1), 0.5)] * 7, [])


@st.composite
def instances(draw, max_n=6):
    n_d, n_g = draw(st.integers(0, max_n)), draw(st.integers(0, max_n))
    imgs, classes = ["a", "b"], [0, 1, 2]
    # coarse grids make exact IoU and score ties likely
    coord = st.sampled_from([0.3, 0.4, 0.5, 0.6])
    size = st.sampled_from([0.1, 0.2, 0.3])
    d = [det(draw(st.sampled_from(imgs)), draw(st.sampled_from(classes)),
             (draw(coord), draw(coord), draw(size), draw(size)), draw(st.sampled_from([0.2, 0.5, 0.9])))
         for _ in range(n_d)]
    g = [gt(draw(st.sampled_from(imgs)), draw(st.sampled_from(classes)),
            (draw(coord), draw(coord), draw(size), draw(size))) for _ in range(n_g)]
    return d, g


@settings(max_examples=300, deadline=None)
@given(instances(), st.sampled_from([0.1, 0.3, 0.5, 0.75]))
def test_greedy_matches_exhaustive_oracle(inst, thr):
    d, g = inst
    a, b = match_detections(d, g, thr), exhaustive_match_oracle(d, g, thr)
    assert a.flags == b.flags
    assert a.matched_gt == b.matched_gt
    assert a.counts == b.counts


@pytest.mark.parametrize("d, g, thr", [
    # IoU exactly 0.5 at threshold 0.5
    ([det("b", 2, (0.4, 0.4, 0.1, 0.1), 0.2)], [gt("b", 2, (0.4, 0.4, 0.1, 0.2))], 0.5),
    # two geometrically equal overlaps whose float IoUs differ by an ulp
    ([det("b", 2, (0.4, 0.4, 0.1, 0.1), 0.2)],
     [gt("b", 2, (0.3, 0.4, 0.2, 0.1)), gt("b", 2, (0.5, 0.4, 0.2, 0.1))], 0.1),
])
def test_boundary_cases_agree_with_oracle(d, g, thr):
    a, b = match_detections(d, g, thr), exhaustive_match_oracle(d, g, thr)
    assert (a.flags, a.matched_gt) == (b.flags, b.matched_gt)
    assert a.flags == [True]


box_st = st.tuples(*[st.sampled_from([0.1, 0.2, 0.3, 0.35, 0.4, 0.5, 0.6])] * 2,
                   *[st.sampled_from([0.05, 0.1, 0.2, 0.3])] * 2)


@settings(max_examples=300, deadline=None)
@given(st.lists(box_st, min_size=1, max_size=4), st.lists(box_st, min_size=1, max_size=4))
def test_iou_matrix_bitwise_equals_scalar(a, b):
    m = iou_matrix(np.array(a), np.array(b))
    assert m.tolist() == [[iou(x, y) for y in b] for x in a]


@settings(max_examples=200, deadline=None)
@given(instances())
def test_count_invariants(inst):
    d, g = inst
    c = match_detections(d, g).counts
    assert c.tp + c.fn == len(g)
    assert c.tp + c.fp == len(d)


# -- precision / recall -------------------------------------------------------------------------

def test_precision_recall_examples():
    assert precision(EvalCounts(9, 1, 0)) == 0.9
    assert precision(EvalCounts(0, 0, 5)) == 0.0
    assert precision(EvalCounts(926, 74, 0)) == 0.926
    assert recall(EvalCounts(9, 0, 3)) == 0.75
    assert recall(EvalCounts(4, 7, 0)) == 1.0
    assert recall(EvalCounts(0, 3, 0)) == 0.0


@given(st.integers(0, 10_000), st.integers(0, 10_000), st.integers(0, 10_000))
def test_precision_recall_are_rational_count_ratios(tp, fp, fn):
    c = EvalCounts(tp, fp, fn)
    p = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    r = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    assert precision(c) == float(p)
    assert recall(c) == float(r)


# -- AP -------------------------------------------------------------------------------------------

def test_ap_examples():
    assert average_precision([0.9], [True], 1) == 1.0
    assert average_precision([0.9], [False], 1) == 0.0
    assert average_precision([], [], 3) == 0.0


@pytest.mark.parametrize("scheme, points", [("101", 101), ("11", 11)])
def test_ap_tp_fp_tp_matches_hand_envelope(scheme, points):
    # PR points: (0.5, 1), (0.5, 0.5), (1, 2/3). Envelope is 1 up to r=0.5, then 2/3.
    flags = [True, False, True]
    expected = ap_by_hand(flags, 2, points)
    n_low = sum(1 for i in range(points) if i / (points - 1) <= 0.5 + 1e-12)
    assert expected == pytest.approx((n_low * 1.0 + (points - n_low) * 2 / 3) / points, abs=1e-15)
    assert average_precision([0.9, 0.8, 0.7], flags, 2, scheme) == pytest.approx(expected, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=12), st.integers(0, 4), st.sampled_from(["101", "11"]))
def test_ap_matches_hand_integration(flags, extra_gt, scheme):
    n_gt = sum(flags) + extra_gt
    if n_gt == 0:
        return
    scores = list(np.linspace(0.9, 0.1, len(flags)))
    assert average_precision(scores, flags, n_gt, scheme) == pytest.approx(
        ap_by_hand(flags, n_gt, int(scheme)), abs=1e-9)


def test_ap_rejects_unknown_scheme():
    with pytest.raises(ValueError, match="scheme"):
        average_precision([0.5], [True], 1, "voc")


# -- mAP over thresholds ---------------------------------------------------------------------------

def test_thresholds_are_the_ten_standard_steps():
    assert len(IOU_THRESHOLDS) == 10
    assert IOU_THRESHOLDS[0] == 0.5 and IOU_THRESHOLDS[-1] == 0.95
    assert np.allclose(np.diff(IOU_THRESHOLDS), 0.05)


def test_map_perfect_detections():
    g = [gt("a", c, (0.2 + 0.3 * c, 0.5, 0.2, 0.3)) for c in range(3)]
    d = [det(x.image_id, x.class_id, x.box, 1.0) for x in g]
    r = map_range(d, g)
    assert r.map50 == 1.0 and r.map50_95 == 1.0


def test_map_iou_around_0p6():
    g = [gt("a", 0, (0.5, 0.5, 0.2, 0.2))]
    d = [det("a", 0, (0.5, 0.5, 0.2, 0.12), 0.9)]  # IoU 0.6
    r = map_range(d, g)
    assert r.map50 == 1.0
    assert [r.per_class[0][t] for t in IOU_THRESHOLDS] == [1.0, 1.0, 1.0] + [0.0] * 7
    assert r.map50_95 == pytest.approx(0.3)


def test_map_three_class_toy_equals_per_threshold_recomputation():
    rng = np.random.default_rng(11)
    g, d = [], []
    for i in range(5):
        for c in range(3):
            b = tuple(rng.uniform([0.2, 0.2, 0.1, 0.1], [0.8, 0.8, 0.3, 0.3]))
            g.append(gt(f"i{i}", c, b))
            jitter = b + rng.normal(0, 0.02, 4) * [1, 1, 0.5, 0.5]
            d.append(det(f"i{i}", c, tuple(jitter), float(rng.uniform(0.3, 1))))
            d.append(det(f"i{i}", c, tuple(rng.uniform([0.2, 0.2, 0.1, 0.1], [0.8, 0.8, 0.3, 0.3])),
                         float(rng.uniform(0, 0.7))))
    r = map_range(d, g)
    aps = []
    for c in range(3):
        idx = [i for i, x in enumerate(d) if x.class_id == c]
        idx.sort(key=lambda i: -d[i].score)
        row = []
        for t in IOU_THRESHOLDS:
            used, flags = set(), []
            for i in idx:
                best, bv = None, -1.0
                for j, y in enumerate(g):
                    if j in used or y.class_id != c or y.image_id != d[i].image_id:
                        continue
                    v = box_iou(d[i].box, y.box)
                    if v > bv:
                        best, bv = j, v
                ok = best is not None and bv >= t
                if ok:
                    used.add(best)
                flags.append(ok)
            row.append(ap_by_hand(flags, 5, 101))
        aps.append(row)
    assert r.map50 == pytest.approx(np.mean([a[0] for a in aps]), abs=1e-9)
    assert r.map50_95 == pytest.approx(np.mean(aps), abs=1e-9)


@settings(max_examples=300, deadline=None)
@given(instances())
def test_ap_non_increasing_in_threshold(inst):
    d, g = inst
    r = map_range(d, g)
    for ap in r.per_class.values():
        vals = [ap[t] for t in IOU_THRESHOLDS]
        assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))
    assert r.map50_95 <= r.map50 + 1e-12


# -- reports --------------------------------------------------------------------------------------

def test_evaluate_on_ground_truth_is_perfect():
    g = [gt(f"i{k}", k % 3, (0.3 + 0.1 * (k % 4), 0.5, 0.2, 0.25)) for k in range(9)]
    rep = evaluate([det(x.image_id, x.class_id, x.box, 1.0) for x in g], g)
    assert (rep.map50, rep.map50_95, rep.precision, rep.recall) == (1.0, 1.0, 1.0, 1.0)
    assert rep.precision_best_f1 == rep.recall_best_f1 == 1.0
    assert rep.degenerate == []


def test_evaluate_flags_degenerate_precision():
    g = [gt("a", 0, (0.5, 0.5, 0.2, 0.2))]
    rep = evaluate([det("a", 0, (0.5, 0.5, 0.2, 0.2), 0.1)], g)  # below the 0.25 operating point
    assert rep.precision == 0.0 and "precision" in rep.degenerate
    assert rep.precision_best_f1 == 1.0


def test_compare_reports_deltas():
    a = EvalReport(0.954, 0.751, 0.926, 0.939)
    b = EvalReport(0.957, 0.752, 0.922, 0.943)
    delta = compare_reports(a, b)
    assert fmt_delta(delta.deltas["map50"]) == "+0.003"
    assert fmt_delta(delta.deltas["precision"]) == "-0.004"
    zero = compare_reports(a, a)
    assert all(v == 0 for v in zero.deltas.values())
    assert "+0.000" in zero.render()
    assert "-0.000" not in zero.render()


def test_compare_reports_class_mismatch():
    a = EvalReport(0.5, 0.3, 0.5, 0.5, per_class={0: {}, 1: {}})
    b = EvalReport(0.5, 0.3, 0.5, 0.5, per_class={0: {}, 2: {}})
    with pytest.raises(ValueError, match="class sets"):
        compare_reports(a, b)


def test_report_roundtrip(tmp_path):
    rep = EvalReport(0.5, 0.25, 0.75, 0.5, per_class={1: {"ap50": 0.5, "ap50_95": 0.25}}, name="x")
    save_report(rep, tmp_path / "r.json")
    assert load_report(tmp_path / "r.json") == rep


def test_detections_file_roundtrip():
    d = [det("img_1", 2, (1 / 3, 0.5, 0.25, 0.125), 0.875)]
    text = write_detections(d)
    assert text == "img_1 2 0.875000 0.333333 0.500000 0.250000 0.125000\n"
    back = parse_detections(text)
    assert back[0].box[0] == 0.333333
    with pytest.raises(ValueError, match="line 1"):
        parse_detections("img 0 0.5 0.5\n")


def test_pr_outputs():
    g = [gt("a", 0, (0.5, 0.5, 0.2, 0.2))]
    d = [det("a", 0, (0.5, 0.5, 0.2, 0.2), 0.9), det("a", 0, (0.1, 0.1, 0.1, 0.1), 0.4)]
    csv_text = pr_points_csv(d, g, thresholds=(0.5,))
    assert csv_text.splitlines()[0] == "class,iou_threshold,rank,score,recall,precision"
    assert len(csv_text.splitlines()) == 3
    svg = pr_curve_svg([0.5, 1.0], [1.0, 0.5], "c0")
    assert svg.startswith("<svg") and "polyline" in svg


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection("a", 0, (0.5, 0.5, 0.1, 0.1), 1.5)
    with pytest.raises(ValueError):
        Detection("a", 0, (0.5, 0.5, -0.1, 0.1), 0.5)
