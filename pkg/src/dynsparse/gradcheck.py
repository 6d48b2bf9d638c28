"""Finite-difference gradient checking for the autodiff engine.

Central differences with step 1e-5 in float64, compared against the
reverse-mode gradients entry by entry.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor

DEFAULT_STEP = 1e-5


def numerical_gradient(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    wrt: int,
    step: float = DEFAULT_STEP,
) -> np.ndarray:
    """Central-difference gradient of ``fn(*inputs)`` w.r.t. ``inputs[wrt]``."""
    target = inputs[wrt]
    flat = target.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(*inputs).item()
        flat[i] = orig - step
        lo = fn(*inputs).item()
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(target.data.shape)


def analytic_gradient(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    wrt: int,
) -> np.ndarray:
    target = inputs[wrt]
    target.zero_grad()
    with Tape() as tape:
        out = fn(*inputs)
    tape.backward(out)
    if target.grad is None:
        return np.zeros_like(target.data)
    return target.grad


def max_relative_error(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    wrt: int,
    step: float = DEFAULT_STEP,
) -> float:
    """Worst-case relative error between analytic and numerical gradients.

    Relative where the gradients are large, absolute where they are tiny:
    err = |a - n| / max(|a|, |n|, 1).
    """
    a = analytic_gradient(fn, inputs, wrt)
    n = numerical_gradient(fn, inputs, wrt, step=step)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float(np.max(np.abs(a - n) / denom))


def assert_gradients_match(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tol: float = 1e-4,
    step: float = DEFAULT_STEP,
) -> None:
    """Check every differentiable input of ``fn`` against finite differences."""
    for i, t in enumerate(inputs):
        if not isinstance(t, Tensor) or not t.requires_grad:
            continue
        if t.data.dtype != np.float64:
            raise AssertionError("gradient checks must run in float64 mode")
        err = max_relative_error(fn, inputs, i, step=step)
        if err >= tol:
            raise AssertionError(
                f"gradient mismatch on input {i} (shape {t.shape}): "
                f"rel err {err:.3e} >= {tol:.1e}"
            )
