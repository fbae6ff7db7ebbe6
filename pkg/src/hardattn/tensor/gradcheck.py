"""Central finite-difference gradient checking at 64-bit precision."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import engine as E
from .engine import Tensor


def numerical_gradient(f: Callable[..., float], arrays: Sequence[np.ndarray], index: int,
                       step: float = 1e-5) -> np.ndarray:
    """d f / d arrays[index] by central differences, perturbing one entry at a time."""
    base = arrays[index]
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = base[i]
        base[i] = orig + step
        hi = f(*arrays)
        base[i] = orig - step
        lo = f(*arrays)
        base[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise |a - b| / max(|a|, |b|); entries where both are below floor count as exact."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(b))
    err = np.where(scale < floor, 0.0, np.abs(a - b) / np.maximum(scale, floor))
    return float(err.max()) if err.size else 0.0


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
                    step: float = 1e-5, wrt: Sequence[int] | None = None) -> float:
    """Max relative error between tape gradients and central differences for ``fn``.

    ``fn`` maps Tensors to a Tensor of any shape; it is contracted with a fixed
    random cotangent to give a scalar. Runs in 64-bit mode.
    """
    rng = np.random.default_rng(seed)
    with E.default_dtype(np.float64):
        arrays = [np.array(x, dtype=np.float64) for x in inputs]
        wrt = range(len(arrays)) if wrt is None else wrt
        probe = fn(*[Tensor(a) for a in arrays])
        cot = rng.standard_normal(probe.shape)

        def scalar(*arrs):
            with E.no_grad():
                out = fn(*[Tensor(a) for a in arrs])
            return float((out.data * cot).sum())

        tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = fn(*tensors)
        E.backward((out * cot).sum())
        worst = 0.0
        for i in wrt:
            num = numerical_gradient(scalar, arrays, i, step)
            ana = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i])
            worst = max(worst, relative_error(ana, num))
    return worst
