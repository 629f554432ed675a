"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(build: Callable[..., Tensor], inputs: Tensor | Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``build`` maps the input tensors to a scalar Tensor. Every input that
    requires grad is perturbed coordinate by coordinate; the error per
    coordinate is ``|a - n| / max(|a|, |n|, 1e-12)``. Coordinates whose true
    gradient is near zero are the sensitive ones: there round-off of order
    1e-11 becomes a visible ratio, so callers should use dense, well-scaled
    test problems.
    """
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for t in inputs:
        t.grad = None
    build(*inputs).backward()
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        numeric_all = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(build(*inputs).data)
            flat[i] = orig - eps
            f_minus = float(build(*inputs).data)
            flat[i] = orig
            numeric_all[i] = (f_plus - f_minus) / (2 * eps)
        a = analytic.reshape(-1).astype(np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric_all)), 1e-12)
        worst = max(worst, float((np.abs(a - numeric_all) / denom).max(initial=0.0)))
    return worst
