"""Shape-preserving attention blocks: SRU, CRU, SCConv (SRU then CRU) and SE.

Each block is a pure function of an input tensor and a flat ``dict`` of
parameter tensors, so the same code path serves training, gradient checks
and parameter accounting.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .tensor import (
    Tensor,
    channel_concat,
    channel_split,
    concat,
    conv2d,
    global_avg_pool,
    group_norm,
    linear,
    relu,
    sigmoid,
    softmax,
)

# Gated value of a channel whose importance equals the channel average.
SIGMOID_ONE = 1.0 / (1.0 + math.exp(-1.0))
_GATE_TIE_TOL = 1e-12


class BlockConfigError(ValueError):
    """A block configuration is invalid at the requested channel width."""


class BlockKind(str, Enum):
    NONE = "none"
    SE = "se"
    SCCONV = "scconv"

    @classmethod
    def parse(cls, value) -> "BlockKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise BlockConfigError(f"unknown block kind {value!r}; expected one of none, se, scconv") from None


@dataclass(frozen=True)
class SRUConfig:
    """Spatial reconstruction unit settings.

    ``gate_threshold`` is compared with ``sigmoid(C * w_i)`` where ``w_i`` is
    channel i's share of the total ``|gamma|``. The default ``sigmoid(1)``
    marks channels of at least average importance as informative; a gated
    value equal to the threshold counts as informative.
    """

    groups: int = 4
    gate_threshold: float = SIGMOID_ONE
    eps: float = 1e-5

    def validate(self, channels: int) -> None:
        if self.groups < 1 or channels % self.groups:
            raise BlockConfigError(f"sru.groups={self.groups} must divide C={channels}")
        if not 0.0 < self.gate_threshold < 1.0:
            raise BlockConfigError(f"sru.gate_threshold={self.gate_threshold} must lie in (0, 1)")
        if channels % 2:
            raise BlockConfigError(f"SRU reconstruction needs an even channel count, got C={channels}")


@dataclass(frozen=True)
class CRUWidths:
    upper: int
    lower: int
    upper_squeezed: int
    lower_squeezed: int


@dataclass(frozen=True)
class CRUConfig:
    alpha: float = 0.5
    squeeze_ratio: int = 2
    gwc_kernel: int = 3
    gwc_groups: int = 2

    def widths(self, channels: int) -> CRUWidths:
        self.validate(channels)
        up = round(self.alpha * channels)
        low = channels - up
        return CRUWidths(up, low, up // self.squeeze_ratio, low // self.squeeze_ratio)

    def validate(self, channels: int) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise BlockConfigError(f"cru.alpha={self.alpha} must lie in (0, 1)")
        up_f = self.alpha * channels
        up = round(up_f)
        if abs(up_f - up) > 1e-9 or up <= 0 or up >= channels:
            raise BlockConfigError(
                f"cru.alpha={self.alpha} splits C={channels} into non-integer or empty parts ({up_f:g})")
        low = channels - up
        r = self.squeeze_ratio
        if r < 1:
            raise BlockConfigError(f"cru.squeeze_ratio={r} must be a positive integer")
        if up % r or low % r:
            raise BlockConfigError(f"cru.squeeze_ratio={r} must divide both split widths {up} and {low}")
        if self.gwc_kernel < 1 or self.gwc_kernel % 2 == 0:
            raise BlockConfigError(f"cru.gwc_kernel={self.gwc_kernel} must be an odd positive integer")
        g = self.gwc_groups
        if g < 1 or (up // r) % g or channels % g:
            raise BlockConfigError(
                f"cru.gwc_groups={g} must divide squeezed upper width {up // r} and C={channels}")
        if low // r >= channels:
            raise BlockConfigError("cru lower path leaves no room for its point-wise expansion")


@dataclass(frozen=True)
class SEConfig:
    """Squeeze-and-excitation settings; ``reduction=None`` picks 16, or C when C < 16."""

    reduction: int | None = None

    def resolve(self, channels: int) -> int:
        r = self.reduction
        if r is None:
            r = 16 if channels >= 16 else channels
        if r < 1 or channels % r:
            raise BlockConfigError(f"se.reduction={r} must divide C={channels}")
        return r


@dataclass(frozen=True)
class BlockConfig:
    kind: BlockKind = BlockKind.NONE
    sru: SRUConfig = field(default_factory=SRUConfig)
    cru: CRUConfig = field(default_factory=CRUConfig)
    se: SEConfig = field(default_factory=SEConfig)

    def validate(self, channels: int) -> None:
        if self.kind is BlockKind.SE:
            self.se.resolve(channels)
        elif self.kind is BlockKind.SCCONV:
            self.sru.validate(channels)
            self.cru.validate(channels)


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# -- SRU -------------------------------------------------------------------------

def init_sru_params(channels: int, cfg: SRUConfig, rng=None) -> dict[str, Tensor]:
    cfg.validate(channels)
    return {"gn.gamma": Tensor(np.ones(channels)), "gn.beta": Tensor(np.zeros(channels))}


def sru_gate(gamma: np.ndarray, cfg: SRUConfig) -> tuple[np.ndarray, np.ndarray]:
    """Return (gated values, informative mask) from group-norm scales."""
    a = np.abs(np.asarray(gamma, dtype=np.float64))
    total = a.sum()
    c = a.size
    w = a / total if total > 0 else np.full(c, 1.0 / c)
    gated = sigmoid(Tensor(c * w)).data
    return gated, gated >= cfg.gate_threshold - _GATE_TIE_TOL


def sru_forward(x: Tensor, cfg: SRUConfig, params: dict[str, Tensor], return_aux: bool = False):
    c = x.shape[1]
    cfg.validate(c)
    gamma, beta = params["gn.gamma"], params["gn.beta"]
    xg = group_norm(x, cfg.groups, gamma, beta, cfg.eps)
    gated, informative = sru_gate(gamma.data, cfg)
    m1 = informative.astype(np.float64)[None, :, None, None]
    x1 = xg * m1
    x2 = xg * (1.0 - m1)
    half = c // 2
    x11, x12 = channel_split(x1, [half, half])
    x21, x22 = channel_split(x2, [half, half])
    out = channel_concat([x11 + x22, x12 + x21])
    if return_aux:
        return out, {"gated": gated, "informative": informative, "non_informative": ~informative}
    return out


# -- CRU -------------------------------------------------------------------------

def init_cru_params(channels: int, cfg: CRUConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    w = cfg.widths(channels)
    k, g = cfg.gwc_kernel, cfg.gwc_groups
    su, sl = w.upper_squeezed, w.lower_squeezed
    return {
        "squeeze_up.weight": Tensor(he_uniform(rng, (su, w.upper, 1, 1), w.upper)),
        "squeeze_low.weight": Tensor(he_uniform(rng, (sl, w.lower, 1, 1), w.lower)),
        "gwc.weight": Tensor(he_uniform(rng, (channels, su // g, k, k), su // g * k * k)),
        "pwc1.weight": Tensor(he_uniform(rng, (channels, su, 1, 1), su)),
        "pwc2.weight": Tensor(he_uniform(rng, (channels - sl, sl, 1, 1), sl)),
    }


def cru_forward(x: Tensor, cfg: CRUConfig, params: dict[str, Tensor], return_aux: bool = False):
    c = x.shape[1]
    w = cfg.widths(c)
    up, low = channel_split(x, [w.upper, w.lower])
    up = conv2d(up, params["squeeze_up.weight"])
    low = conv2d(low, params["squeeze_low.weight"])
    pad = cfg.gwc_kernel // 2
    y1 = conv2d(up, params["gwc.weight"], padding=pad, groups=cfg.gwc_groups) + conv2d(up, params["pwc1.weight"])
    y2 = channel_concat([conv2d(low, params["pwc2.weight"]), low])
    # two-way softmax per channel over the pooled path descriptors
    logits = concat([global_avg_pool(y1), global_avg_pool(y2)], axis=2)
    gates = softmax(logits, axis=2)
    beta1, beta2 = gates[:, :, 0:1, :], gates[:, :, 1:2, :]
    out = beta1 * y1 + beta2 * y2
    if return_aux:
        return out, {"beta1": beta1.data, "beta2": beta2.data}
    return out


# -- SCConv ----------------------------------------------------------------------

def init_scconv_params(channels: int, sru: SRUConfig, cru: CRUConfig, rng) -> dict[str, Tensor]:
    params = {f"sru.{k}": v for k, v in init_sru_params(channels, sru).items()}
    params.update({f"cru.{k}": v for k, v in init_cru_params(channels, cru, rng).items()})
    return params


def _sub(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def scconv_forward(x: Tensor, sru: SRUConfig, cru: CRUConfig, params: dict[str, Tensor]) -> Tensor:
    return cru_forward(sru_forward(x, sru, _sub(params, "sru.")), cru, _sub(params, "cru."))


# -- SE --------------------------------------------------------------------------

def init_se_params(channels: int, cfg: SEConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    hidden = channels // cfg.resolve(channels)
    return {
        "fc1.weight": Tensor(he_uniform(rng, (hidden, channels), channels)),
        "fc1.bias": Tensor(np.zeros(hidden)),
        "fc2.weight": Tensor(he_uniform(rng, (channels, hidden), hidden)),
        "fc2.bias": Tensor(np.zeros(channels)),
    }


def se_forward(x: Tensor, cfg: SEConfig, params: dict[str, Tensor], return_aux: bool = False):
    n, c = x.shape[:2]
    cfg.resolve(c)
    s = global_avg_pool(x).reshape(n, c)
    s = relu(linear(s, params["fc1.weight"], params["fc1.bias"]))
    gates = sigmoid(linear(s, params["fc2.weight"], params["fc2.bias"])).reshape(n, c, 1, 1)
    out = x * gates
    if return_aux:
        return out, {"gates": gates.data}
    return out


# -- dispatch + accounting -------------------------------------------------------

def init_block_params(cfg: BlockConfig, channels: int, rng: np.random.Generator) -> dict[str, Tensor]:
    cfg.validate(channels)
    if cfg.kind is BlockKind.SE:
        return init_se_params(channels, cfg.se, rng)
    if cfg.kind is BlockKind.SCCONV:
        return init_scconv_params(channels, cfg.sru, cfg.cru, rng)
    return {}


def block_forward(cfg: BlockConfig, x: Tensor, params: dict[str, Tensor]) -> Tensor:
    if cfg.kind is BlockKind.SE:
        return se_forward(x, cfg.se, params)
    if cfg.kind is BlockKind.SCCONV:
        return scconv_forward(x, cfg.sru, cfg.cru, params)
    return x


def block_param_count(kind, channels: int, cfg: BlockConfig | None = None) -> int:
    """Closed-form number of parameter elements a block allocates at width C."""
    kind = BlockKind.parse(kind)
    cfg = cfg or BlockConfig(kind=kind)
    c = channels
    if kind is BlockKind.NONE:
        return 0
    if kind is BlockKind.SE:
        h = c // cfg.se.resolve(c)
        return c * h + h + h * c + c
    cfg.sru.validate(c)
    w = cfg.cru.widths(c)
    k, g = cfg.cru.gwc_kernel, cfg.cru.gwc_groups
    su, sl = w.upper_squeezed, w.lower_squeezed
    return (2 * c
            + su * w.upper + sl * w.lower
            + c * (su // g) * k * k + c * su
            + (c - sl) * sl)


# primitive layer nodes per block: conv, norm, activation, pooling, split, concat, dense
_SRU_LAYERS = 5   # group norm, gate sigmoid, 2 splits, concat
_CRU_LAYERS = 11  # split, 2 squeeze convs, gwc, pwc1, pwc2, concat, 2 pools, stack, softmax
_SE_LAYERS = 5    # pool, dense, relu, dense, sigmoid


def block_layer_count(kind) -> int:
    kind = BlockKind.parse(kind)
    if kind is BlockKind.SE:
        return _SE_LAYERS
    if kind is BlockKind.SCCONV:
        return _SRU_LAYERS + _CRU_LAYERS
    return 0
