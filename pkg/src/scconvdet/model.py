"""Small anchor-free detector with a named splice point for an attention block."""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import serialize
from .blocks import (
    BlockConfig,
    BlockKind,
    block_forward,
    block_layer_count,
    block_param_count,
    he_uniform,
    init_block_params,
)
from .tensor import Tensor, conv2d, group_norm, silu, trace_ops

LAYER_KINDS = frozenset({"conv2d", "group_norm", "activation", "pool", "split", "concat", "softmax", "linear"})
OBJ_PRIOR_BIAS = -4.0


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    """Stage widths and downsampling; the stem is stage 0."""

    stage_widths: tuple[int, ...] = (16, 32, 64)
    strides: tuple[int, ...] = (2, 2, 2)
    insertion_anchor: str = "head.post_conv1"
    norm_groups: int = 4

    def anchors(self) -> dict[str, int]:
        """Splice positions and the channel width at each."""
        out = {"stem": self.stage_widths[0]}
        for i in range(1, len(self.stage_widths)):
            out[f"stage{i}"] = self.stage_widths[i]
        out["head.post_conv1"] = self.stage_widths[-1]
        return out

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    def validate(self) -> None:
        if not self.stage_widths or len(self.stage_widths) != len(self.strides):
            raise ModelConfigError("stage_widths and strides must be non-empty and of equal length")
        if any(w <= 0 for w in self.stage_widths):
            raise ModelConfigError(f"stage widths must be positive, got {self.stage_widths}")
        if any(s < 1 or s & (s - 1) for s in self.strides):
            raise ModelConfigError(f"strides must be powers of two, got {self.strides}")
        if any(w % self.norm_groups for w in self.stage_widths):
            raise ModelConfigError(f"norm_groups={self.norm_groups} must divide every stage width")
        if self.insertion_anchor not in self.anchors():
            raise ModelConfigError(
                f"unknown insertion_anchor {self.insertion_anchor!r}; choose from {sorted(self.anchors())}")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str          # "conv", "gn", "act", "block"
    count: int         # primitive layer nodes contributed
    params: int        # closed-form parameter elements


@dataclass(frozen=True)
class ModelStats:
    parameters: int
    layers: int
    gradients: int

    HEADER = ("Parameters", "Layers", "Gradients")


def conv_param_count(cin: int, cout: int, k: int, groups: int = 1, bias: bool = False) -> int:
    """Weights plus biases of one convolution, e.g. ``16 * (3 * 9 + 1) = 448`` for 3→16, k=3, biased."""
    return cout * (cin // groups) * k * k + (cout if bias else 0)


def _kernel_for(stride: int) -> tuple[int, int]:
    """(kernel, padding) giving an exact H/stride output for H divisible by stride."""
    return (3, 1) if stride == 1 else (2 * stride, stride // 2)


def _layer_rng(seed: int, name: str) -> np.random.Generator:
    # one stream per layer name keeps shared layers identical across block choices
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class Model:
    """Conv stem, residual stages, a two-conv head and an optional spliced block.

    Output is N × (5 + num_classes) × H/s × W/s with channels
    ``(tx, ty, tw, th, objectness, class logits...)``.
    """

    def __init__(self, backbone: BackboneConfig, block: BlockConfig, num_classes: int, seed: int = 0):
        backbone.validate()
        if num_classes < 1:
            raise ModelConfigError(f"num_classes must be positive, got {num_classes}")
        width = backbone.anchors()[backbone.insertion_anchor]
        block.validate(width)
        self.backbone = backbone
        self.block = block
        self.num_classes = num_classes
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self.layers: list[LayerSpec] = []
        self.frozen: set[str] = set()
        self._build()

    # -- construction ------------------------------------------------------------
    def _conv(self, name, cin, cout, k, bias=False, groups=1):
        rng = _layer_rng(self.seed, name)
        fan_in = cin // groups * k * k
        self.params[f"{name}.weight"] = Tensor(he_uniform(rng, (cout, cin // groups, k, k), fan_in))
        if bias:
            self.params[f"{name}.bias"] = Tensor(np.zeros(cout))
        self.layers.append(LayerSpec(name, "conv", 1, conv_param_count(cin, cout, k, groups, bias)))

    def _gn(self, name, c):
        self.params[f"{name}.gamma"] = Tensor(np.ones(c))
        self.params[f"{name}.beta"] = Tensor(np.zeros(c))
        self.layers.append(LayerSpec(name, "gn", 1, 2 * c))

    def _act(self, name):
        self.layers.append(LayerSpec(name, "act", 1, 0))

    def _conv_unit(self, name, cin, cout, k):
        self._conv(f"{name}.conv", cin, cout, k)
        self._gn(f"{name}.gn", cout)
        self._act(f"{name}.act")

    def _maybe_block(self, anchor: str, width: int):
        if anchor != self.backbone.insertion_anchor or self.block.kind is BlockKind.NONE:
            return
        params = init_block_params(self.block, width, _layer_rng(self.seed, "block"))
        for k, v in params.items():
            self.params[f"block.{k}"] = v
        self.layers.append(LayerSpec("block", "block", block_layer_count(self.block.kind),
                                     block_param_count(self.block.kind, width, self.block)))

    def _build(self):
        bb = self.backbone
        w = bb.stage_widths
        k, _ = _kernel_for(bb.strides[0])
        self._conv_unit("stem", 3, w[0], k)
        self._maybe_block("stem", w[0])
        for i in range(1, len(w)):
            k, _ = _kernel_for(bb.strides[i])
            self._conv_unit(f"stage{i}.down", w[i - 1], w[i], k)
            self._conv_unit(f"stage{i}.res1", w[i], w[i], 3)
            self._conv(f"stage{i}.res2.conv", w[i], w[i], 3)
            self._gn(f"stage{i}.res2.gn", w[i])
            self._act(f"stage{i}.res2.act")
            self._maybe_block(f"stage{i}", w[i])
        self._conv_unit("head.conv1", w[-1], w[-1], 3)
        self._maybe_block("head.post_conv1", w[-1])
        self._conv("head.pred", w[-1], 5 + self.num_classes, 1, bias=True)
        self.params["head.pred.bias"].data[4] = OBJ_PRIOR_BIAS
        for t in self.params.values():
            t.requires_grad = True

    # -- forward -------------------------------------------------------------------
    def _unit(self, name, x, stride=1, pad=1):
        p = self.params
        x = conv2d(x, p[f"{name}.conv.weight"], stride=stride, padding=pad)
        x = group_norm(x, self.backbone.norm_groups, p[f"{name}.gn.gamma"], p[f"{name}.gn.beta"])
        return x

    def _splice(self, anchor, x):
        if anchor != self.backbone.insertion_anchor or self.block.kind is BlockKind.NONE:
            return x
        params = {k[6:]: v for k, v in self.params.items() if k.startswith("block.")}
        return block_forward(self.block, x, params)

    def forward(self, x: Tensor) -> Tensor:
        bb = self.backbone
        _, pad = _kernel_for(bb.strides[0])
        h = silu(self._unit("stem", x, bb.strides[0], pad=pad))
        h = self._splice("stem", h)
        for i in range(1, len(bb.stage_widths)):
            _, pad = _kernel_for(bb.strides[i])
            h = silu(self._unit(f"stage{i}.down", h, bb.strides[i], pad=pad))
            r = silu(self._unit(f"stage{i}.res1", h))
            h = silu(h + self._unit(f"stage{i}.res2", r))
            h = self._splice(f"stage{i}", h)
        h = silu(self._unit("head.conv1", h))
        h = self._splice("head.post_conv1", h)
        return conv2d(h, self.params["head.pred.weight"], self.params["head.pred.bias"])

    __call__ = forward

    # -- parameters ------------------------------------------------------------------
    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if not self._is_frozen(k)}

    def _is_frozen(self, name: str) -> bool:
        return any(name == f or name.startswith(f + ".") for f in self.frozen)

    def freeze(self, prefix: str) -> None:
        if not any(k == prefix or k.startswith(prefix + ".") for k in self.params):
            raise KeyError(f"no parameters under {prefix!r}")
        self.frozen.add(prefix)
        for k, t in self.params.items():
            if self._is_frozen(k):
                t.requires_grad = False

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ModelConfigError(f"state mismatch on {sorted(missing)[:5]}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ModelConfigError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def config_dict(self) -> dict:
        return {
            "backbone": asdict(self.backbone),
            "block": block_config_to_dict(self.block),
            "num_classes": self.num_classes,
            "seed": self.seed,
        }


def build_model(backbone: BackboneConfig, block: BlockConfig | BlockKind | str, num_classes: int,
                seed: int = 0) -> Model:
    if not isinstance(block, BlockConfig):
        block = BlockConfig(kind=BlockKind.parse(block))
    return Model(backbone, block, num_classes, seed)


def model_stats(model: Model) -> ModelStats:
    """Parameter, primitive-layer and trainable-element counts from the layer table."""
    params = sum(spec.params for spec in model.layers)
    layers = sum(spec.count for spec in model.layers)
    frozen = sum(v.size for k, v in model.params.items() if model._is_frozen(k))
    return ModelStats(params, layers, params - frozen)


def traced_layer_count(model: Model, image_size: int | None = None) -> int:
    """Primitive layers actually executed by one forward pass."""
    s = image_size or 2 * model.backbone.total_stride
    with trace_ops() as ops:
        model.forward(Tensor(np.zeros((1, 3, s, s))))
    return sum(1 for op in ops if op in LAYER_KINDS)


def format_stats_table(rows: dict[str, ModelStats]) -> str:
    lines = [f"{'Model':<12}{'Parameters':>12}{'Layers':>8}{'Gradients':>12}"]
    for name, st in rows.items():
        lines.append(f"{name:<12}{st.parameters:>12}{st.layers:>8}{st.gradients:>12}")
    return "\n".join(lines)


def images_to_tensor(images) -> Tensor:
    """Stack H×W×3 uint8 images into an N×3×H×W tensor scaled to [0, 1]."""
    arr = np.stack([np.asarray(im, dtype=np.float64) for im in images]).transpose(0, 3, 1, 2) / 255.0
    return Tensor(arr)


# -- configs <-> dicts ------------------------------------------------------------------

def block_config_to_dict(cfg: BlockConfig) -> dict:
    return {"kind": cfg.kind.value, "sru": asdict(cfg.sru), "cru": asdict(cfg.cru), "se": asdict(cfg.se)}


def block_config_from_dict(d: dict) -> BlockConfig:
    from .blocks import CRUConfig, SEConfig, SRUConfig

    d = d or {}
    return BlockConfig(kind=BlockKind.parse(d.get("kind", "none")),
                       sru=SRUConfig(**d.get("sru", {})),
                       cru=CRUConfig(**d.get("cru", {})),
                       se=SEConfig(**d.get("se", {})))


def backbone_from_dict(d: dict) -> BackboneConfig:
    d = dict(d or {})
    for k in ("stage_widths", "strides"):
        if k in d:
            d[k] = tuple(int(v) for v in d[k])
    return BackboneConfig(**d)


# -- checkpoints --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: Model
    manifest: dict = field(default_factory=dict)


def save_checkpoint(model: Model, directory, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus one tensor container per parameter."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    names = list(model.params)
    for name in names:
        serialize.save_tensor(directory / "params" / f"{name}.scct", model.params[name].data)
    st = model_stats(model)
    manifest = {
        "format": "scconvdet-checkpoint",
        "version": 1,
        "config": model.config_dict(),
        "stats": asdict(st),
        "seed": model.seed,
        "frozen": sorted(model.frozen),
        "params": names,
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cfg = manifest["config"]
    model = Model(backbone_from_dict(cfg["backbone"]), block_config_from_dict(cfg["block"]),
                  int(cfg["num_classes"]), int(cfg.get("seed", 0)))
    model.load_state_dict({n: serialize.load_tensor(directory / "params" / f"{n}.scct")
                           for n in manifest["params"]})
    for prefix in manifest.get("frozen", []):
        model.freeze(prefix)
    return Checkpoint(model, manifest)


def checkpoint_element_count(directory) -> int:
    directory = Path(directory)
    return sum(serialize.element_count(p) for p in sorted((directory / "params").glob("*.scct")))
