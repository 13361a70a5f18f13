"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations needed by the attention blocks and the detector are
provided. Gradients are recorded on an explicit :class:`Tape`; outside a
tape every op is a plain numpy computation.

    >>> with Tape() as tape:
    ...     y = activation(x, "sigmoid").sum()
    >>> tape.backward(y)
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "backward",
    "current_tape",
    "trace_ops",
    "as_tensor",
    "conv2d",
    "conv2d_direct",
    "group_norm",
    "global_avg_pool",
    "activation",
    "sigmoid",
    "relu",
    "silu",
    "softmax",
    "channel_split",
    "channel_concat",
    "concat",
    "linear",
    "maximum",
    "minimum",
    "arctan",
    "exp",
    "log",
    "bce_with_logits",
    "detach",
    "stop_gradient_replay",
]

_SIG_HI = 1.0 - 2.0**-53
_SIG_LO = np.finfo(np.float64).tiny


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class Tensor:
    """N-dimensional float64 array with an optional gradient slot."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    # -- array-like surface --------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(as_tensor(other), self)

    def __sub__(self, other):
        return _sub(self, other)

    def __rsub__(self, other):
        return _sub(as_tensor(other), self)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(as_tensor(other), self)

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(as_tensor(other), self)

    def __neg__(self):
        return _mul(self, -1.0)

    def __pow__(self, p: float):
        return _pow(self, p)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return _sum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Operations are appended in execution order, so every record's inputs
    were produced by an earlier record (or are leaves). ``backward`` walks
    the records once, newest first.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not produced on this tape")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = pending.pop(id(rec.output), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._tape is None:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    key = id(t)
                    pending[key] = gi if key not in pending else pending[key] + gi


_TAPES: list[Tape] = []
_TRACES: list[list[str]] = []


def current_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf feeding ``loss``.

    Leaf gradients accumulate across calls; clear them with ``zero_grad``.
    """
    tape = tape or loss._tape
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        raise ValueError("loss has no tape; run the forward pass inside `with Tape():`")
    tape.backward(loss)


@contextlib.contextmanager
def trace_ops():
    """Collect the kind of every layer-level op executed inside the block."""
    log: list[str] = []
    _TRACES.append(log)
    try:
        yield log
    finally:
        _TRACES.remove(log)


def _trace(kind: str) -> None:
    for log in _TRACES:
        log.append(kind)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], bwd, kind: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._tape = None
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.records.append(_Record(kind, inputs, out, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic -------------------------------------------------

def _add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def _sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def _mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def _div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), bwd, "div")


def _pow(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def arctan(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.arctan(ad), (a,), lambda g: (g / (1.0 + ad * ad),), "arctan")


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick = a.data >= b.data
    return _make(np.where(pick, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)), "maximum")


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick = a.data <= b.data
    return _make(np.where(pick, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)), "minimum")


# -- shape ops ---------------------------------------------------------------

def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bwd, "sum")


def _reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def _getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx], dtype=np.float64), (a,), bwd, "index")


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    if not parts:
        raise ShapeError("concat needs at least one part")
    ref = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != axis):
            raise ShapeError(f"concat axis {axis}: shape {tuple(other)} incompatible with {tuple(ref)}")
    _trace("concat")
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bwd, "concat")


def channel_concat(parts: Sequence[Tensor]) -> Tensor:
    """Join N×C×H×W tensors along the channel axis."""
    parts = list(parts)
    if not parts:
        raise ShapeError("channel_concat needs at least one part")
    n, _, h, w = _nchw(parts[0], "channel_concat")
    for p in parts[1:]:
        pn, _, ph, pw = _nchw(p, "channel_concat")
        if (pn, ph, pw) != (n, h, w):
            raise ShapeError(f"channel_concat: spatial mismatch (N,H,W)={(pn, ph, pw)} vs {(n, h, w)}")
    return concat(parts, axis=1)


def channel_split(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Cut ``x`` into contiguous channel slabs of the given sizes."""
    _, c, _, _ = _nchw(x, "channel_split")
    sizes = [int(s) for s in sizes]
    if any(s <= 0 for s in sizes) or sum(sizes) != c:
        raise ShapeError(f"channel_split: sizes {sizes} do not sum to C={c}")
    _trace("split")
    out, start = [], 0
    for s in sizes:
        out.append(_getitem(x, (slice(None), slice(start, start + s))))
        start += s
    return out


def _nchw(x: Tensor, op: str) -> tuple[int, int, int, int]:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected N×C×H×W input, got shape {x.shape}")
    return x.shape  # type: ignore[return-value]


# -- layer ops -----------------------------------------------------------------

def _conv_out(size: int, k: int, stride: int, padding: int, axis: str) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv2d: {axis}={size} with kernel {k}, stride {stride}, padding {padding} "
            f"does not give an integral output size")
    return span // stride + 1


def _conv_single(xp: np.ndarray, w: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    k = w.shape[2]
    if k == 1:
        win = xp[:, :, ::stride, ::stride][:, :, :ho, :wo]
        return np.tensordot(w[:, :, 0, 0], win, axes=([1], [1])).transpose(1, 0, 2, 3)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)


def _conv_single_grads(xp, w, g, stride, ho, wo):
    k = w.shape[2]
    if k == 1:
        win = xp[:, :, ::stride, ::stride][:, :, :ho, :wo]
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
        dxp = np.zeros_like(xp)
        dxp[:, :, ::stride, ::stride][:, :, :ho, :wo] += np.tensordot(
            w[:, :, 0, 0], g, axes=([0], [1])).transpose(1, 0, 2, 3)
        return dxp, gw
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    cols = np.tensordot(g, w, axes=([1], [0]))  # N,Ho,Wo,Cin,k,k
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[..., i, j].transpose(0, 3, 1, 2)
    return dxp, gw


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation (no kernel flip), NCHW layout."""
    n, cin, h, w_ = _nchw(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be Cout×Cin/g×k×k, got {weight.shape}")
    cout, cin_g, kh, kw = weight.shape
    if stride < 1 or padding < 0 or groups < 1:
        raise ValueError(f"conv2d: bad stride={stride}, padding={padding}, groups={groups}")
    if kh != kw:
        raise ShapeError(f"conv2d: square kernels only, got {kh}×{kw}")
    if cin % groups or cout % groups:
        raise ShapeError(f"conv2d: Cin={cin} and Cout={cout} must both be divisible by groups={groups}")
    if cin_g * groups != cin:
        raise ShapeError(f"conv2d: weight expects Cin/g={cin_g} but input has Cin={cin}, groups={groups}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ho = _conv_out(h, kh, stride, padding, "H")
    wo = _conv_out(w_, kw, stride, padding, "W")
    _trace("conv2d")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wd = weight.data
    og = cout // groups
    if groups == 1:
        out = _conv_single(xp, wd, stride, ho, wo)
    else:
        out = np.concatenate(
            [_conv_single(xp[:, gi * cin_g:(gi + 1) * cin_g], wd[gi * og:(gi + 1) * og], stride, ho, wo)
             for gi in range(groups)], axis=1)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bwd(g):
        dxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for gi in range(groups):
            ci, co = slice(gi * cin_g, (gi + 1) * cin_g), slice(gi * og, (gi + 1) * og)
            d, dw = _conv_single_grads(xp[:, ci], wd[co], g[:, co], stride, ho, wo)
            dxp[:, ci] = d
            gw[co] = dw
        dx = dxp[:, :, padding:padding + h, padding:padding + w_] if padding else dxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (dx, gw) if bias is None else (dx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), inputs, bwd, "conv2d")


def conv2d_direct(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
                  stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
    """Loop-based cross-correlation; slow, used as the reference path."""
    n, cin, h, w = x.shape
    cout, cin_g, k, _ = weight.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    og = cout // groups
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for o in range(cout):
            grp = o // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin_g):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[b, grp * cin_g + c, i * stride + u, j * stride + v] * weight[o, c, u, v]
                    out[b, o, i, j] = acc + (bias[o] if bias is not None else 0.0)
    return out


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n, c, h, w = _nchw(x, "group_norm")
    if groups < 1 or c % groups:
        raise ShapeError(f"group_norm: C={c} not divisible by groups={groups}")
    if not eps > 0:
        raise ValueError(f"group_norm: eps must be > 0, got {eps}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: gamma/beta must have shape ({c},)")
    _trace("group_norm")
    xg = x.data.reshape(n, groups, -1)
    m = xg.shape[2]
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxh = (g * gd).reshape(n, groups, m)
        xh = xhat.reshape(n, groups, m)
        dx = inv * (dxh - dxh.mean(axis=2, keepdims=True) - xh * (dxh * xh).mean(axis=2, keepdims=True))
        return dx.reshape(n, c, h, w), dgamma, dbeta

    return _make(out, (x, gamma, beta), bwd, "group_norm")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = _nchw(x, "global_avg_pool")
    if h < 1 or w < 1:
        raise ShapeError("global_avg_pool: empty spatial plane")
    _trace("pool")
    scale = 1.0 / (h * w)
    return _make(x.data.mean(axis=(2, 3), keepdims=True), (x,),
                 lambda g: (np.broadcast_to(g * scale, (n, c, h, w)).copy(),), "global_avg_pool")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep the range open so gates never saturate to exactly 0 or 1
    return np.clip(s, _SIG_LO, _SIG_HI)


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise ``sigmoid``, ``relu`` or ``silu``."""
    z = x.data
    if kind == "sigmoid":
        s = _sigmoid_np(z)
        out, bwd = s, (lambda g: (g * s * (1.0 - s),))
    elif kind == "relu":
        pos = z > 0
        out, bwd = np.where(pos, z, 0.0), (lambda g: (g * pos,))
    elif kind == "silu":
        s = _sigmoid_np(z)
        out, bwd = z * s, (lambda g: (g * (s + z * s * (1.0 - s)),))
    else:
        raise ValueError(f"unknown activation {kind!r}")
    _trace("activation")
    return _make(out, (x,), bwd, kind)


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def silu(x: Tensor) -> Tensor:
    return activation(x, "silu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    _trace("softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Dense map ``x @ weight.T + bias`` for x of shape N×Din."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    _trace("linear")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bwd(g):
        grads = (g @ wd, g.T @ xd)
        return grads if bias is None else grads + (g.sum(axis=0),)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, bwd, "linear")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on raw logits (numerically stable)."""
    z = logits.data
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    t = np.broadcast_to(t, z.shape)
    out = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    s = _sigmoid_np(z)
    return _make(out, (logits,), lambda g: (g * (s - t),), "bce")


# -- stop-gradient ---------------------------------------------------------------

class _StopGradientReplay:
    def __init__(self):
        self.values: list[np.ndarray] = []
        self.pos = 0
        self.replaying = False


_REPLAY: list[_StopGradientReplay] = []


@contextlib.contextmanager
def stop_gradient_replay():
    """Freeze ``detach`` outputs at the values seen on the first pass.

    The first evaluation inside the context records every detached value;
    call ``.rewind()`` on the yielded handle to replay them in order. A
    finite-difference probe then differentiates the same surrogate function
    reverse mode does.
    """
    rec = _StopGradientReplay()

    class Handle:
        def rewind(self_inner):
            rec.replaying = True
            rec.pos = 0

    _REPLAY.append(rec)
    try:
        yield Handle()
    finally:
        _REPLAY.remove(rec)


def detach(x: Tensor) -> Tensor:
    """Return ``x``'s value as a constant (no gradient flows through)."""
    if _REPLAY:
        rec = _REPLAY[-1]
        if rec.replaying:
            value = rec.values[rec.pos]
            rec.pos += 1
            return Tensor(value)
        rec.values.append(x.data.copy())
    return Tensor(x.data.copy())
