"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    analytic: list
    numeric: list

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def numerical_grad(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-6) -> list:
    grads = []
    for x in inputs:
        g = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*inputs).data)
            flat[i] = orig - h
            fm = float(f(*inputs).data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def grad_check(f: Callable[..., Tensor], x, h: float = 1e-6, tol: float = 1e-5) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f`` with central differences.

    ``x`` is one tensor or a sequence of tensors, passed positionally to ``f``.
    The error is normwise per input: max|analytic - numeric| divided by the
    larger of the two max-magnitudes, so near-zero entries don't dominate.
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    numeric = numerical_grad(f, inputs, h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
        if scale == 0.0:
            continue
        worst = max(worst, float(np.abs(a - n).max() / scale))
    return GradCheckReport(worst, tol, analytic, numeric)
