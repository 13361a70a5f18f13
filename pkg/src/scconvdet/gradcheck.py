"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, stop_gradient_replay

__all__ = ["CoordinateCheck", "GradCheckReport", "grad_check"]


@dataclass(frozen=True)
class CoordinateCheck:
    input_index: int
    flat_index: int
    analytic: float
    numeric: float
    rel_error: float
    ok: bool


@dataclass
class GradCheckReport:
    tol: float
    coordinates: list[CoordinateCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((c.rel_error for c in self.coordinates), default=0.0)

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.coordinates)

    @property
    def failures(self) -> list[CoordinateCheck]:
        return [c for c in self.coordinates if not c.ok]

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        line = f"{status} coords={len(self.coordinates)} max_rel_err={self.max_rel_error:.3e} tol={self.tol:g}"
        for c in self.failures[:5]:
            line += (f"\n  input[{c.input_index}] flat[{c.flat_index}] analytic={c.analytic:.6e} "
                     f"numeric={c.numeric:.6e} rel={c.rel_error:.3e}")
        return line


def grad_check(fn: Callable[..., Tensor], inputs: Tensor | Sequence[Tensor], h: float = 1e-5,
               tol: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of scalar ``fn`` with central differences.

    Every coordinate of every input is probed with
    ``(fn(x + h e_i) - fn(x - h e_i)) / 2h``. The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    coordinates whose true derivative is ~0 from reporting roundoff as
    relative error. Values passed through ``detach`` are held at their
    base-point values during probing.
    """
    if not 0 < h <= 1e-2:
        raise ValueError(f"step h must lie in (0, 1e-2], got {h}")
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for t in inputs:
        if not t.is_leaf:
            raise ValueError("grad_check inputs must be leaf tensors")
        t.data = np.array(t.data, dtype=np.float64)  # own, contiguous buffer
        t.requires_grad = True
        t.grad = None

    report = GradCheckReport(tol=tol)
    with stop_gradient_replay() as replay:
        with Tape() as tape:
            out = fn(*inputs)
        if out.size != 1:
            raise ValueError(f"grad_check needs a scalar-valued fn, got shape {out.shape}")
        tape.backward(out)
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

        def evaluate() -> float:
            replay.rewind()
            return fn(*inputs).item()

        for k, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = evaluate()
                flat[i] = orig - h
                fm = evaluate()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                a = float(analytic[k].reshape(-1)[i])
                rel = abs(a - num) / max(abs(a), abs(num), floor)
                report.coordinates.append(CoordinateCheck(k, i, a, num, rel, rel < tol))
    for t in inputs:
        t.grad = None
    return report
