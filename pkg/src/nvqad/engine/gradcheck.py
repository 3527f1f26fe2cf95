"""Central-difference gradient checking for functions built on the tape engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from nvqad.engine.tensor import Tape, Tensor

__all__ = ["grad_check", "numeric_grad"]


def numeric_grad(fn: Callable[..., Tensor], point: Sequence[np.ndarray], eps: float) -> list[np.ndarray]:
    """Central differences of ``fn`` at ``point``, one array per argument."""
    arrays = [np.array(p, copy=True) for p in point]
    grads = []
    for i, arr in enumerate(arrays):
        g = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = float(fn(*[Tensor(a) for a in arrays]).data)
            flat[j] = orig - eps
            f_minus = float(fn(*[Tensor(a) for a in arrays]).data)
            flat[j] = orig
            g.reshape(-1)[j] = (f_plus - f_minus) / (2 * eps)
        grads.append(g)
    return grads


def grad_check(
    fn: Callable[..., Tensor],
    point: Sequence[np.ndarray] | np.ndarray,
    eps: float = 1e-3,
    dtype=np.float64,
) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    ``fn`` takes one Tensor per array in ``point`` and returns a scalar Tensor.
    The point is cast to ``dtype`` (float64 by default) so that the finite
    differences are not swamped by float32 rounding of the function value.
    """
    if isinstance(point, np.ndarray):
        point = [point]
    arrays = [np.asarray(p, dtype=dtype) for p in point]
    params = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*params)
    if out.requires_grad:
        tape.backward(out)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    numeric = numeric_grad(fn, arrays, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size == 0:
            continue
        err = np.abs(a - n) / np.maximum(1.0, np.abs(a))
        worst = max(worst, float(err.max()))
    return worst
