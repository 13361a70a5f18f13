"""SGD-with-momentum training loop and model evaluation."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .data import LabeledImage
from .loss import LossWeights, assign_targets, detection_loss
from .metrics import EvalReport, GroundTruthBox, evaluate
from .model import Model, images_to_tensor
from .postprocess import decode_predictions
from .tensor import Tape, Tensor


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.937
    batch_size: int = 4
    epochs: int = 30
    iou_match_threshold: float = 0.5
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 < self.iou_match_threshold <= 1.0:
            raise ValueError(f"iou_match_threshold must lie in (0, 1], got {self.iou_match_threshold}")


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: dict[str, np.ndarray],
             cfg: TrainConfig) -> None:
    """Classical momentum: ``v = m*v + g; p = p - lr*v`` (in place)."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        v = state.get(name)
        v = g.copy() if v is None else cfg.momentum * v + g
        state[name] = v
        p.data = p.data - cfg.learning_rate * v


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    map50: float = float("nan")
    map50_95: float = float("nan")
    precision: float = float("nan")
    recall: float = float("nan")


@dataclass
class TrainResult:
    model: Model
    log: list[EpochLog]
    reports: list[EvalReport]
    seconds: float = 0.0

    def log_csv(self) -> str:
        return format_log(self.log)


def format_log(log: Sequence[EpochLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "map50", "map50_95", "precision", "recall"])
    for e in log:
        w.writerow([e.epoch] + [repr(float(v)) for v in (e.train_loss, e.map50, e.map50_95, e.precision, e.recall)])
    return buf.getvalue()


def ground_truths(items: Sequence[LabeledImage]) -> list[GroundTruthBox]:
    return [GroundTruthBox(it.stem, lb.class_id, lb.box) for it in items for lb in it.labels]


def predict(model: Model, items: Sequence[LabeledImage], batch_size: int = 16,
            score_threshold: float = 0.001, nms_iou: float = 0.5):
    dets = []
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        out = model.forward(images_to_tensor([it.pixels for it in chunk])).data
        dets.extend(decode_predictions(out, [it.stem for it in chunk], score_threshold, nms_iou))
    return dets


def evaluate_model(model: Model, items: Sequence[LabeledImage], scheme: str = "101",
                   iou_threshold: float = 0.5, name: str = "") -> EvalReport:
    return evaluate(predict(model, items), ground_truths(items), scheme=scheme, iou_threshold=iou_threshold,
                    classes=range(model.num_classes), name=name)


def _check_items(model: Model, items: Sequence[LabeledImage]) -> None:
    stride = model.backbone.total_stride
    for it in items:
        h, w = it.pixels.shape[:2]
        if h != w or h % stride:
            raise ValueError(f"{it.stem}: image {h}x{w} must be square with side divisible by {stride}")
        for lb in it.labels:
            if lb.class_id >= model.num_classes:
                raise ValueError(f"{it.stem}: class {lb.class_id} >= num_classes={model.num_classes}")


def train(model: Model, dataset: Sequence[LabeledImage], cfg: TrainConfig, rng_seed: int = 0,
          test: Sequence[LabeledImage] | None = None,
          on_epoch: Callable[[EpochLog], None] | None = None) -> TrainResult:
    """Train in place; deterministic for a given seed (single BLAS thread)."""
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    _check_items(model, dataset)
    rng = np.random.default_rng(rng_seed)
    state: dict[str, np.ndarray] = {}
    log, reports = [], []
    t0 = time.perf_counter()
    grid = dataset[0].pixels.shape[0] // model.backbone.total_stride
    with threadpool_limits(limits=1):
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(dataset))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
                x = images_to_tensor([it.pixels for it in batch])
                assign = assign_targets(grid, [it.labels for it in batch])
                trainable = model.trainable()
                with Tape() as tape:
                    loss = detection_loss(model.forward(x), assign, cfg.loss_weights)
                tape.backward(loss)
                grads = {k: p.grad for k, p in trainable.items() if p.grad is not None}
                sgd_step(trainable, grads, state, cfg)
                for p in model.params.values():
                    p.grad = None
                losses.append(loss.item())
            entry = EpochLog(epoch, float(np.mean(losses)))
            if test:
                rep = evaluate_model(model, test, iou_threshold=cfg.iou_match_threshold)
                reports.append(rep)
                entry.map50, entry.map50_95 = rep.map50, rep.map50_95
                entry.precision, entry.recall = rep.precision, rep.recall
            log.append(entry)
            if on_epoch:
                on_epoch(entry)
    return TrainResult(model, log, reports, time.perf_counter() - t0)


def epoch_log_dict(e: EpochLog) -> dict:
    return asdict(e)
