import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scconvdet.blocks import BlockConfig, BlockKind, CRUConfig, SEConfig, SRUConfig
from scconvdet.data import SyntheticSpec, LabeledImage, render_synthetic
from scconvdet.gradcheck import grad_check
from scconvdet.loss import LossWeights, assign_targets, ciou_loss, decode_boxes, detection_loss, grid_cell
from scconvdet.metrics import Detection, iou
from scconvdet.model import (
    BackboneConfig,
    ModelConfigError,
    build_model,
    checkpoint_element_count,
    conv_param_count,
    format_stats_table,
    load_checkpoint,
    model_stats,
    save_checkpoint,
    traced_layer_count,
)
from scconvdet.postprocess import decode_predictions, nms
from scconvdet.tensor import Tensor
from scconvdet.train import TrainConfig, format_log, sgd_step, train

from .oracles import box_iou, ciou_reference


def items(n, seed=0, size=32):
    return [LabeledImage(img, labels, f"{i:05d}.ppm")
            for i, (img, labels) in enumerate(render_synthetic(SyntheticSpec(n, image_size=size, seed=seed)))]


# -- construction -----------------------------------------------------------------------------

def test_output_grid_shape():
    m = build_model(BackboneConfig(), "scconv", num_classes=3)
    out = m(Tensor(np.zeros((2, 3, 32, 32))))
    assert out.shape == (2, 8, 4, 4)


def test_splice_isolation():
    ref = build_model(BackboneConfig(), "none", 3, seed=5)
    for kind in ("se", "scconv"):
        other = build_model(BackboneConfig(), kind, 3, seed=5)
        shared = set(ref.params) & set(other.params)
        assert shared == set(ref.params)
        for k in shared:
            np.testing.assert_array_equal(ref.params[k].data, other.params[k].data)
        assert any(k.startswith("block.") for k in other.params)


@pytest.mark.parametrize("anchor", ["stem", "stage1", "stage2", "head.post_conv1"])
@pytest.mark.parametrize("kind", ["se", "scconv"])
def test_every_anchor_works(anchor, kind):
    m = build_model(BackboneConfig(insertion_anchor=anchor), kind, 2)
    assert m(Tensor(np.zeros((1, 3, 16, 16)))).shape == (1, 7, 2, 2)
    assert model_stats(m).layers == traced_layer_count(m)


def test_backbone_validation():
    with pytest.raises(ModelConfigError, match="insertion_anchor"):
        build_model(BackboneConfig(insertion_anchor="layer37"), "none", 3)
    with pytest.raises(ModelConfigError, match="powers of two"):
        build_model(BackboneConfig(strides=(2, 3, 2)), "none", 3)
    with pytest.raises(ModelConfigError, match="num_classes"):
        build_model(BackboneConfig(), "none", 0)


# -- statistics ---------------------------------------------------------------------------------

def test_single_conv_closed_form():
    assert conv_param_count(3, 16, 3, bias=True) == 16 * (3 * 9 + 1) == 448
    w, b = np.empty((16, 3, 3, 3)), np.empty(16)
    assert w.size + b.size == 448


@pytest.mark.parametrize("kind", list(BlockKind))
def test_stats_equal_enumeration(kind):
    m = build_model(BackboneConfig(), kind, 3)
    st_ = model_stats(m)
    assert st_.parameters == sum(p.size for p in m.params.values())
    assert st_.gradients == st_.parameters
    assert st_.layers == traced_layer_count(m)


def test_freeze_reduces_gradients_and_blocks_updates():
    m = build_model(BackboneConfig(), "none", 3)
    m.freeze("stem")
    st_ = model_stats(m)
    assert st_.gradients < st_.parameters
    assert st_.parameters - st_.gradients == sum(v.size for k, v in m.params.items() if k.startswith("stem."))
    before = m.params["stem.conv.weight"].data.copy()
    train(m, items(4, size=16), TrainConfig(epochs=1, batch_size=2))
    np.testing.assert_array_equal(m.params["stem.conv.weight"].data, before)
    with pytest.raises(KeyError):
        m.freeze("nope")


def test_stats_table_layout():
    rows = {k: model_stats(build_model(BackboneConfig(), k, 3)) for k in ("none", "se", "scconv")}
    lines = format_stats_table(rows).splitlines()
    assert lines[0].split() == ["Model", "Parameters", "Layers", "Gradients"]
    assert [ln.split()[0] for ln in lines[1:]] == ["none", "se", "scconv"]
    assert rows["none"].parameters < rows["se"].parameters


def test_checkpoint_roundtrip(tmp_path):
    m = build_model(BackboneConfig(), "scconv", 3, seed=2)
    m.freeze("stem")
    save_checkpoint(m, tmp_path / "ck")
    assert checkpoint_element_count(tmp_path / "ck") == model_stats(m).parameters
    ck = load_checkpoint(tmp_path / "ck")
    assert ck.manifest["stats"]["parameters"] == model_stats(m).parameters
    assert ck.model.frozen == {"stem"}
    for k, v in m.params.items():
        np.testing.assert_array_equal(ck.model.params[k].data, v.data)


# -- CIoU ------------------------------------------------------------------------------------------

def test_ciou_examples():
    assert ciou_loss([[0.5, 0.5, 0.2, 0.3]], [[0.5, 0.5, 0.2, 0.3]]).data.tolist() == [0.0]
    # concentric, same aspect: IoU = 0.25 / 1
    v = ciou_loss([[0.5, 0.5, 0.1, 0.2]], [[0.5, 0.5, 0.2, 0.4]]).item()
    assert v == pytest.approx(1 - 0.25, abs=1e-15)
    got = ciou_loss([[0.5, 0.5, 0.2, 0.2]], [[0.6, 0.5, 0.2, 0.2]]).item()
    # IoU = 0.02 / 0.06, rho^2 = 0.01, enclosing 0.3 x 0.2
    assert got == pytest.approx(1 - 1 / 3 + 0.01 / 0.13, rel=1e-12)
    assert got == pytest.approx(ciou_reference((0.5, 0.5, 0.2, 0.2), (0.6, 0.5, 0.2, 0.2)), rel=1e-12)


def test_ciou_degenerate_pair_is_zero():
    assert ciou_loss([[0.5, 0.5, 0.0, 0.0]], [[0.5, 0.5, 0.0, 0.0]]).item() == 0.0


box_st = st.tuples(st.floats(0.1, 0.9), st.floats(0.1, 0.9), st.floats(0.02, 0.6), st.floats(0.02, 0.6))


@settings(max_examples=200, deadline=None)
@given(box_st, box_st)
def test_ciou_properties(p, t):
    loss = ciou_loss([p], [t]).item()
    assert loss >= 0
    assert loss == pytest.approx(ciou_reference(p, t), rel=1e-9, abs=1e-12)
    assert 0 <= 1 - iou(p, t) <= 1
    assert ciou_loss([p], [p]).item() == 0.0
    if p != t:
        assert loss > 0


def test_ciou_gradient_with_constant_alpha():
    rng = np.random.default_rng(0)
    pred = Tensor(rng.uniform([0.3, 0.3, 0.1, 0.1], [0.7, 0.7, 0.4, 0.4], (5, 4)))
    target = rng.uniform([0.3, 0.3, 0.1, 0.1], [0.7, 0.7, 0.4, 0.4], (5, 4))
    rep = grad_check(lambda p: ciou_loss(p, target).sum(), pred)
    assert rep.passed, rep.summary()


# -- assignment and loss ------------------------------------------------------------------------------

def test_assign_examples():
    assert grid_cell(0.5, 0.5, 8) == (4, 4)
    a = assign_targets(8, [[]])
    assert a.num_positive == 0
    a = assign_targets(8, [[(1, (0.51, 0.51, 0.1, 0.1)), (2, (0.52, 0.52, 0.2, 0.2))]])
    assert a.num_positive == 1
    assert a.classes[0, 4, 4] == 2
    a = assign_targets(8, [[(2, (0.51, 0.51, 0.1, 0.1)), (1, (0.52, 0.52, 0.1, 0.1))]])
    assert a.classes[0, 4, 4] == 1
    assert grid_cell(1.0, 1.0, 8) == (7, 7)


def test_zero_positives_is_objectness_only():
    preds = Tensor(np.random.default_rng(0).normal(size=(1, 8, 4, 4)))
    a = assign_targets(4, [[]])
    only_obj = detection_loss(preds, a, LossWeights(box=0, obj=1, cls=0)).item()
    assert detection_loss(preds, a).item() == only_obj


def _logit(p):
    return math.log(p / (1 - p))


def test_perfect_predictions_drive_loss_to_zero():
    g = 4
    box = (0.3, 0.6, 0.25, 0.4)
    a = assign_targets(g, [[(1, box)]])
    r, c = grid_cell(box[0], box[1], g)
    preds = np.full((1, 8, g, g), -40.0)
    preds[0, 0, r, c] = _logit(box[0] * g - c)
    preds[0, 1, r, c] = _logit(box[1] * g - r)
    preds[0, 2, r, c] = _logit(box[2])
    preds[0, 3, r, c] = _logit(box[3])
    preds[0, 4, r, c] = 40.0
    preds[0, 6, r, c] = 40.0
    assert detection_loss(Tensor(preds), a).item() < 1e-12


def test_detection_loss_gradcheck():
    rng = np.random.default_rng(3)
    a = assign_targets(4, [[(0, (0.3, 0.3, 0.2, 0.3)), (2, (0.7, 0.6, 0.3, 0.2))]])
    preds = Tensor(rng.normal(size=(1, 8, 4, 4)))
    rep = grad_check(lambda p: detection_loss(p, a), preds)
    assert rep.passed, rep.summary()


def test_decode_matches_postprocess():
    raw = np.random.default_rng(1).normal(size=(1, 8, 4, 4))
    rows, cols = np.array([1, 3]), np.array([2, 0])
    boxes = decode_boxes(Tensor(raw[0, :4, rows, cols]), rows, cols, 4).data
    dets = decode_predictions(raw, ["x"], score_threshold=0.0, iou_threshold=1.0, max_per_image=1000)
    for b in boxes:
        assert any(np.allclose(d.box, b, rtol=0, atol=1e-15) for d in dets)


# -- optimizer ------------------------------------------------------------------------------------------

def test_sgd_examples():
    p = {"w": Tensor(np.array([1.0]))}
    sgd_step(p, {"w": np.array([2.0])}, {}, TrainConfig(learning_rate=0.1, momentum=0.0))
    assert p["w"].data[0] == pytest.approx(0.8, abs=1e-15)

    p = {"w": Tensor(np.array([1.0]))}
    state = {"w": np.zeros(1)}
    sgd_step(p, {"w": np.zeros(1)}, state, TrainConfig())
    assert p["w"].data[0] == 1.0

    # v1 = g, v2 = 0.937 g + g: total displacement lr * g * (1 + 1.937)
    p, state, cfg = {"w": Tensor(np.array([0.0]))}, {}, TrainConfig()
    for _ in range(2):
        sgd_step(p, {"w": np.array([3.0])}, state, cfg)
    assert p["w"].data[0] == pytest.approx(-0.01 * 3.0 * (1 + 1.937), rel=1e-14)


def test_train_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.momentum, cfg.batch_size, cfg.iou_match_threshold) == (0.01, 0.937, 4, 0.5)
    for bad in (dict(learning_rate=0), dict(momentum=1.0), dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()


# -- NMS ------------------------------------------------------------------------------------------------

def brute_force_nms(dets, thr, score_thr=0.0):
    keep = []
    cand = [d for d in dets if d.score >= score_thr]
    while cand:
        best = max(range(len(cand)), key=lambda i: (cand[i].score, -i))
        d = cand.pop(best)
        keep.append(d)
        cand = [e for e in cand
                if not (e.image_id == d.image_id and e.class_id == d.class_id and box_iou(e.box, d.box) >= thr)]
    return keep


def test_nms_examples():
    d = Detection("a", 0, (0.5, 0.5, 0.2, 0.2), 0.9)
    assert nms([d], 0.5) == [d]
    e = Detection("a", 0, (0.5, 0.5, 0.2, 0.2), 0.8)
    assert nms([e, d], 0.5) == [d]
    chain = [Detection("a", 0, (0.3 + 0.05 * i, 0.5, 0.2, 0.2), s) for i, s in enumerate([0.5, 0.9, 0.6, 0.8, 0.7])]
    assert nms(chain, 0.5) == brute_force_nms(chain, 0.5)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("ab"), st.integers(0, 1), st.floats(0.2, 0.8), st.floats(0.2, 0.8),
                          st.floats(0.05, 0.3), st.floats(0.05, 0.3), st.sampled_from([0.1, 0.4, 0.7, 0.9])),
                max_size=12),
       st.sampled_from([0.3, 0.5, 0.7]), st.sampled_from([0.0, 0.5]))
def test_nms_properties(raw, thr, score_thr):
    dets = [Detection(i, c, (x, y, w, h), s) for i, c, x, y, w, h, s in raw]
    kept = nms(dets, thr, score_thr)
    assert kept == brute_force_nms(dets, thr, score_thr)
    assert all(k in dets for k in kept)
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            if (a.image_id, a.class_id) == (b.image_id, b.class_id):
                assert iou(a.box, b.box) < thr


# -- training ---------------------------------------------------------------------------------------------

def test_epochs_zero_leaves_init():
    m = build_model(BackboneConfig(), "se", 3, seed=1)
    fresh = build_model(BackboneConfig(), "se", 3, seed=1)
    res = train(m, items(4, size=16), TrainConfig(epochs=0))
    assert res.log == []
    for k in m.params:
        np.testing.assert_array_equal(m.params[k].data, fresh.params[k].data)


def test_training_is_bit_reproducible():
    logs = []
    for _ in range(2):
        m = build_model(BackboneConfig(), "scconv", 3, seed=4)
        data = items(8, seed=1, size=16)
        logs.append(format_log(train(m, data, TrainConfig(epochs=2), rng_seed=7, test=data[:4]).log))
    assert logs[0] == logs[1]


def test_train_rejects_bad_inputs():
    m = build_model(BackboneConfig(), "none", 3)
    with pytest.raises(ValueError, match="empty"):
        train(m, [], TrainConfig(epochs=1))
    odd = [LabeledImage(np.zeros((12, 12, 3), np.uint8), [], "x.ppm")]
    with pytest.raises(ValueError, match="divisible"):
        train(m, odd, TrainConfig(epochs=1))


def test_block_configs_flow_into_model():
    cfg = BlockConfig(BlockKind.SCCONV, SRUConfig(groups=2), CRUConfig(alpha=0.25, gwc_groups=1), SEConfig())
    m = build_model(BackboneConfig(), cfg, 3)
    assert model_stats(m).parameters == sum(p.size for p in m.params.values())
    assert m(Tensor(np.zeros((1, 3, 16, 16)))).shape == (1, 8, 2, 2)
