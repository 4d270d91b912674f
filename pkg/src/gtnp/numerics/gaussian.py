"""Diagonal Gaussians: reparameterized sampling and closed-form KL."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor


class InvalidDistributionError(ValueError):
    pass


@dataclass
class DiagGaussian:
    """Diagonal Gaussian over the last axis.

    ``mean`` and ``logvar`` are tensors of identical shape ``(..., d)``; leading
    axes index independent distributions (one per sample in a batch).
    """

    mean: Tensor
    logvar: Tensor

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.logvar = as_tensor(self.logvar)
        if self.mean.shape != self.logvar.shape:
            raise ValueError(f"mean shape {self.mean.shape} != logvar shape {self.logvar.shape}")
        if self.mean.ndim == 0 or self.mean.shape[-1] < 1:
            raise ValueError("DiagGaussian needs at least one dimension")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.logvar.data)

    def validate(self) -> None:
        if not (np.all(np.isfinite(self.mean.data)) and np.all(np.isfinite(self.logvar.data))):
            raise InvalidDistributionError("non-finite Gaussian parameters")
        if not np.all(np.isfinite(self.var)) or np.any(self.var <= 0):
            raise InvalidDistributionError("variance must be strictly positive and finite")

    def __getitem__(self, index) -> "DiagGaussian":
        return DiagGaussian(self.mean[index], self.logvar[index])


def reparam_sample(g: DiagGaussian, rng: np.random.Generator) -> Tensor:
    """Draw ``mean + exp(logvar / 2) * eps`` with ``eps ~ N(0, I)``.

    Differentiable with respect to both ``mean`` and ``logvar``.
    """
    g.validate()
    eps = rng.standard_normal(g.mean.shape)
    return g.mean + (g.logvar * 0.5).exp() * eps


def kl_diag_gaussians(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) summed over the last axis.

    Returns a tensor with the leading (batch) shape of the inputs; a scalar for
    single distributions.
    """
    if q.mean.shape != p.mean.shape:
        raise ValueError(f"KL dimension mismatch: {q.mean.shape} vs {p.mean.shape}")
    var_ratio = (q.logvar - p.logvar).exp()
    diff = q.mean - p.mean
    maha = diff * diff * (-p.logvar).exp()
    terms = (var_ratio + maha - 1.0 - (q.logvar - p.logvar)) * 0.5
    return terms.sum(axis=-1)


def standard_normal_like(g: DiagGaussian) -> DiagGaussian:
    return DiagGaussian(Tensor(np.zeros(g.mean.shape)), Tensor(np.zeros(g.mean.shape)))
