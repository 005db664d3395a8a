"""Finite-difference gradient verification harness.

`check_gradients` runs a function twice: once on watched tensors to collect
tape gradients, and once per perturbed element to form central differences.
The comparison metric is

    max|g_tape - g_fd|  /  max(1, max|g_fd|)

i.e. absolute error normalized by the gradient's own scale, floored at 1 so
near-zero gradients are judged absolutely. The effective step is measured
as the realized float difference (x+h and x-h round in the working
precision), which keeps the quotient honest in 32-bit mode.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor

__all__ = ["check_gradients", "fd_gradient"]


def fd_gradient(
    fn: Callable[[list[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    index: int,
    h: float = 1e-3,
) -> np.ndarray:
    """Central-difference gradient of `fn` w.r.t. arrays[index]."""
    base = [np.array(a, copy=True) for a in arrays]
    target = base[index]
    grad = np.zeros(target.shape, dtype=np.float64)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi_x = float(flat[i])
        hi = float(fn([Tensor(a.copy()) for a in base]).data)
        flat[i] = orig - h
        lo_x = float(flat[i])
        lo = float(fn([Tensor(a.copy()) for a in base]).data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (hi_x - lo_x)
    return grad


def check_gradients(
    fn: Callable[[list[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    wrt: Sequence[int] | None = None,
    h: float = 1e-3,
) -> float:
    """Max normalized gradient error of `fn` over the chosen inputs.

    `fn` maps a list of Tensors to a scalar Tensor and must be pure. `wrt`
    selects which inputs to differentiate (default: all).
    """
    arrays = [np.asarray(a) for a in arrays]
    if wrt is None:
        wrt = range(len(arrays))
    with Tape() as tape:
        tensors = [tape.watch(a.copy()) for a in arrays]
        loss = fn(tensors)
        grads = tape.backward(loss)
    worst = 0.0
    for i in wrt:
        g_tape = grads[tensors[i].node].astype(np.float64)
        g_fd = fd_gradient(fn, arrays, i, h=h)
        err = np.abs(g_tape - g_fd).max(initial=0.0)
        scale = max(1.0, np.abs(g_fd).max(initial=0.0))
        worst = max(worst, err / scale)
    return worst
