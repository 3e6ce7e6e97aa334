"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor, no_grad


def grad_check(f, x, eps=1e-5):
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic; any
    hard assignments inside it are assumed stable under +-eps perturbation.
    The relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    leaf = Tensor(np.array(x.data if isinstance(x, Tensor) else x, copy=True),
                  requires_grad=True)
    out = f(leaf)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad

    base = leaf.data
    numeric = np.zeros_like(base)
    with no_grad():
        flat = base.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(Tensor(base)).item()
            flat[i] = orig - eps
            lo = f(Tensor(base)).item()
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
