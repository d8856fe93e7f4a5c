"""
gradcheck.py - Finite-difference verification of analytic gradients
"""

from typing import Callable

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, get_precision


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """
    Compare the tape gradient of a scalar function against central differences.

    Args:
        f: Differentiable function of ``x`` returning a scalar Tensor.
           It is re-evaluated for every perturbation, so it must rebuild its
           graph on each call.
        x: Point of evaluation; its data is perturbed in place and restored
        eps: Central-difference step

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |analytic|)

    Examples:
        >>> x = Tensor([1.0, 2.0], requires_grad=True)
        >>> grad_check(lambda t: (t * t).sum(), x) < 1e-8
        True
    """
    if get_precision() != "f64":
        raise ValueError("grad_check requires 64-bit precision (SLOTPOLICY_PRECISION=f64)")

    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = f(x).item()
        flat[i] = orig - eps
        minus = f(x).item()
        flat[i] = orig
        num_flat[i] = (plus - minus) / (2 * eps)

    x.grad = None
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
