"""Finite-difference verification of analytic gradients.

Runs the graph in float64 and compares every parameter's backward gradient
against central differences. The comparison is relative with an absolute
floor: |analytic - numeric| <= tol * max(1, |analytic|, |numeric|).
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor

DEFAULT_EPS = 1e-3
DEFAULT_TOL = 1e-4


def gradcheck(fn, params: list[Tensor], eps: float = DEFAULT_EPS,
              tol: float = DEFAULT_TOL) -> float:
    """Check d fn / d p for every element of every parameter tensor.

    `fn` must rebuild the graph from the current parameter values and return
    a scalar Tensor. Returns the worst mixed relative/absolute error;
    raises AssertionError when it exceeds `tol`.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("gradcheck requires float64 parameters")
        p.zero_grad()
    out = fn()
    out.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    worst = 0.0
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn().item()
            flat[i] = orig - eps
            f_minus = fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[k].reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
            if err > tol:
                raise AssertionError(
                    f"gradient mismatch in param {k} at flat index {i}: "
                    f"analytic={a!r} numeric={numeric!r} err={err:.3e}")
    return worst
