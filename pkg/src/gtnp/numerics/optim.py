"""Adam and RMSprop over named parameter tensors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    method: str = "rmsprop"
    learning_rate: float = 0.01
    betas: tuple = (0.9, 0.999)
    alpha: float = 0.99
    eps: float = 1e-8
    step: int = 0
    moments: dict = field(default_factory=dict)

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in ("adam", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.method!r}; expected 'adam' or 'rmsprop'")
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be non-negative")


def optimizer_step(state: OptimizerState, params: dict[str, Tensor], grads: dict[str, np.ndarray] | None = None) -> dict[str, Tensor]:
    """Apply one update in place and return ``params``.

    ``grads`` defaults to each parameter's accumulated ``.grad`` (missing
    gradients count as zero). The whole step is rejected, leaving parameters
    and moments untouched, if any gradient is non-finite.
    """
    if grads is None:
        grads = {name: p.grad for name, p in params.items()}
    resolved = {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}; step rejected")
        resolved[name] = g

    state.step += 1
    lr = state.learning_rate
    if state.method == "adam":
        b1, b2 = state.betas
        c1 = 1.0 - b1**state.step
        c2 = 1.0 - b2**state.step
        for name, p in params.items():
            g = resolved[name]
            m, v = state.moments.get(name, (np.zeros_like(g), np.zeros_like(g)))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            state.moments[name] = (m, v)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    else:
        a = state.alpha
        for name, p in params.items():
            g = resolved[name]
            (v,) = state.moments.get(name, (np.zeros_like(g),))
            v = a * v + (1.0 - a) * g * g
            state.moments[name] = (v,)
            p.data = p.data - lr * g / (np.sqrt(v) + state.eps)
    return params
