"""Finite-difference verification of recorded gradients.

Run in double precision: central differences with step 1e-5 resolve
smooth operators to relative errors far below the 1e-4 gate used by the
test suite, so any disagreement above it points at a wrong backward
rule rather than at numerics.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from ..errors import GraphError
from .tensor import Tensor, backward


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
) -> float:
    """Largest relative error between analytic and numeric gradients.

    f rebuilds the scalar loss from the current contents of `inputs`
    every time it is called; the inputs are perturbed in place one
    coordinate at a time.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise GraphError(
                "grad_check requires float64 inputs, got "
                f"{t.data.dtype} for shape {t.shape}"
            )
        t.zero_grad()

    loss = f()
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got {loss.shape}")
    backward(loss)

    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        num = np.empty_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = f().item()
            flat[i] = keep - step
            lo = f().item()
            flat[i] = keep
            num[i] = (hi - lo) / (2.0 * step)
        num = num.reshape(t.data.shape)
        denom = np.maximum.reduce(
            [np.abs(analytic), np.abs(num), np.full_like(num, 1e-6)]
        )
        err = float(np.max(np.abs(analytic - num) / denom))
        worst = max(worst, err)
    return worst
