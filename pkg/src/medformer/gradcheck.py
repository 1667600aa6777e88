"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``.

    The floor keeps exactly-zero gradients (e.g. a key bias, which softmax
    cancels) from turning finite-difference noise into a relative error of 1.
    """
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numerical_grad(loss_fn: Callable[[], float], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` with respect to every entry of ``param``."""
    grad = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_fn()
        flat[i] = orig - eps
        down = loss_fn()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * eps)
    return grad


def check_gradients(build_loss: Callable[[], Tensor], params: Sequence[Tensor],
                    eps: float = 1e-5) -> dict[int, float]:
    """Relative error per parameter between backprop and central differences.

    ``build_loss`` must rebuild the scalar loss from the current parameter
    values on every call; the parameters should be float64.
    """
    for p in params:
        p.grad = None
    build_loss().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    value = lambda: float(build_loss().data)  # noqa: E731
    return {i: relative_error(a, numerical_grad(value, p, eps))
            for i, (a, p) in enumerate(zip(analytic, params))}
