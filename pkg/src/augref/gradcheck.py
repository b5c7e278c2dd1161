from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def grad_check(
    fn: Callable[[Tensor], Tensor], x: Tensor, tol: float = 1e-4, step: float = 1e-5
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``fn(x)`` with central differences.

    The relative error per element is ``|a - n| / max(1, |a|, |n|)``. Failures
    are reported, never raised.
    """
    x.requires_grad = True
    x.grad = None
    out = fn(x)
    if out.node is None:
        analytic = np.zeros_like(x.data)
    else:
        backward(out)
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    x.grad = None

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn(x).item()
            flat[i] = orig - step
            f_minus = fn(x).item()
            flat[i] = orig
            num_flat[i] = (f_plus - f_minus) / (2 * step)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    err = float(np.max(np.abs(analytic - numeric) / denom)) if x.data.size else 0.0
    return GradCheckReport(err, err <= tol, analytic, numeric)
