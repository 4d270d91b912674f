"""Trainable building blocks shared by the model components."""
from __future__ import annotations

import numpy as np

from .numerics import Tensor, conv2d, parameter


class Module:
    """Minimal parameter container: attributes that are Tensors or Modules are collected."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix=name + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = 1.0):
        # He-style scaling; gain 1.0 suits ReLU inputs, smaller for output heads
        scale = gain * np.sqrt(2.0 / n_in)
        self.weight = parameter(rng.standard_normal((n_in, n_out)) * scale)
        self.bias = parameter(np.zeros(n_out))

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        fan_in = c_in * kernel * kernel
        self.weight = parameter(rng.standard_normal((c_out, c_in, kernel, kernel)) * np.sqrt(2.0 / fan_in))
        self.bias = parameter(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)


def split_gaussian_params(raw: Tensor, dim: int, clamp: float = 10.0):
    """Split a (..., 2*dim) head output into (mean, clamped logvar)."""
    mean = raw[..., :dim]
    logvar = raw[..., dim:].clip(-clamp, clamp)
    return mean, logvar
