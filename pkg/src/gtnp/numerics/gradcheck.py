from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def gradient_check(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6) -> float:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` takes no arguments and must rebuild its graph from the current values
    of ``params`` on every call (any randomness has to be re-seeded inside).
    Returns ``max |analytic - numeric| / max(1, |analytic|)`` over all
    coordinates of all ``params``.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError("perturbation h must lie in [1e-7, 1e-4]")
    for p in params:
        p.grad = None
    out = fn()
    if not np.isfinite(out.data).all():
        raise FloatingPointError("function value is not finite at the check point")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn().item()
            flat[i] = orig - h
            f_minus = fn().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError("non-finite evaluation during finite differencing")
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = ga.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
