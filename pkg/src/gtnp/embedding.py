"""Shared CNN feature extractor, global latent variable and the p(u | h) head."""
from __future__ import annotations

import numpy as np

from .layers import Dense, Conv2d, Module, split_gaussian_params
from .numerics import DiagGaussian, Tensor, as_tensor, concat, max_pool2d, parameter, reparam_sample

LOGVAR_CLAMP = 10.0


def _conv_pool_size(n: int) -> int:
    # valid 3x3 conv then floor 2x2 pool
    return (n - 2) // 2


class FeatureExtractor(Module):
    """conv3x3(1->8) -> ReLU -> pool -> conv3x3(8->16) -> ReLU -> pool -> dense(d_f)."""

    def __init__(self, input_shape: tuple[int, int], rng: np.random.Generator, d_f: int = 48):
        H, W = input_shape
        h2 = _conv_pool_size(_conv_pool_size(H))
        w2 = _conv_pool_size(_conv_pool_size(W))
        if h2 < 1 or w2 < 1:
            raise ValueError(f"input {H}x{W} is too small for two conv+pool stages")
        self.input_shape = (H, W)
        self.d_f = d_f
        self.conv1 = Conv2d(1, 8, 3, rng)
        self.conv2 = Conv2d(8, 16, 3, rng)
        self.flat_size = 16 * h2 * w2
        self.dense = Dense(self.flat_size, d_f, rng)

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"input shape {tuple(x.shape[1:])} does not match extractor {self.input_shape}")
        n = x.shape[0]
        a = max_pool2d(self.conv1(x.reshape(n, 1, *self.input_shape)).relu())
        a = max_pool2d(self.conv2(a).relu())
        return self.dense(a.reshape(n, self.flat_size))


class GlobalLatent(Module):
    """Variational N(mean, exp(logvar)) over z_global, initialised to N(0, I)."""

    def __init__(self, d_g: int = 16):
        self.mean = parameter(np.zeros(d_g))
        self.logvar = parameter(np.zeros(d_g))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def distribution(self) -> DiagGaussian:
        return DiagGaussian(self.mean, self.logvar)

    def sample(self, rng: np.random.Generator) -> Tensor:
        return reparam_sample(self.distribution(), rng)


class EmbeddingHead(Module):
    def __init__(self, d_in: int, rng: np.random.Generator, d_u: int = 64):
        self.d_u = d_u
        self.dense = Dense(d_in, 2 * d_u, rng, gain=0.1)

    def __call__(self, h: Tensor) -> DiagGaussian:
        mean, logvar = split_gaussian_params(self.dense(h), self.d_u, LOGVAR_CLAMP)
        return DiagGaussian(mean, logvar)


def embed(extractor: FeatureExtractor, x, z_g: Tensor) -> Tensor:
    """h = [CNN(x) | z_global] with one z_global row broadcast over the batch."""
    feats = extractor(x)
    z_g = as_tensor(z_g)
    if z_g.ndim != 1:
        raise ValueError("z_global must be a single vector shared by the batch")
    ones = Tensor(np.ones((feats.shape[0], 1)))
    return concat([feats, ones @ z_g.reshape(1, -1)], axis=1)


def u_distribution(head: EmbeddingHead, h: Tensor) -> DiagGaussian:
    return head(h)


def sample_u(dist: DiagGaussian, mode: str = "stochastic", rng: np.random.Generator | None = None) -> Tensor:
    if mode == "mean":
        return dist.mean
    if mode != "stochastic":
        raise ValueError(f"mode must be 'stochastic' or 'mean', got {mode!r}")
    if rng is None:
        raise ValueError("stochastic sampling needs an rng")
    return reparam_sample(dist, rng)
