"""Graph-conditioned ("real") and amortized ("estimated") local latent distributions."""
from __future__ import annotations

import logging

import numpy as np

from .layers import Dense, Module, split_gaussian_params
from .numerics import DiagGaussian, Tensor, as_tensor, concat, softmax

log = logging.getLogger(__name__)

LOGVAR_CLAMP = 10.0
MESSAGE_WIDTH = 64


class RealDistHead(Module):
    """theta_r: message net over [u_j | onehot(y_j)] and an output net to (mean, logvar)."""

    def __init__(self, d_u: int, class_count: int, rng: np.random.Generator, d_z: int = 64):
        self.d_z = d_z
        self.class_count = class_count
        self.message = Dense(d_u + class_count, MESSAGE_WIDTH, rng)
        self.output = Dense(MESSAGE_WIDTH, 2 * d_z, rng, gain=0.1)

    def messages(self, u_ref: Tensor, onehot_ref) -> Tensor:
        return self.message(concat([as_tensor(u_ref), as_tensor(onehot_ref)], axis=1)).relu()

    def distribution(self, aggregate: Tensor) -> DiagGaussian:
        mean, logvar = split_gaussian_params(self.output(aggregate), self.d_z, LOGVAR_CLAMP)
        return DiagGaussian(mean, logvar)


class EstDistHead(Module):
    """theta_e: amortized q(z | u)."""

    def __init__(self, d_u: int, rng: np.random.Generator, d_z: int = 64):
        self.d_z = d_z
        self.dense = Dense(d_u, 2 * d_z, rng, gain=0.1)

    def __call__(self, u: Tensor) -> DiagGaussian:
        mean, logvar = split_gaussian_params(self.dense(as_tensor(u)), self.d_z, LOGVAR_CLAMP)
        return DiagGaussian(mean, logvar)


class ClassifierHead(Module):
    def __init__(self, d_z: int, d_u: int, class_count: int, rng: np.random.Generator):
        self.dense = Dense(d_z + d_u, class_count, rng, gain=0.5)

    def logits(self, z: Tensor, u: Tensor) -> Tensor:
        return self.dense(concat([as_tensor(z), as_tensor(u)], axis=1))


def one_hot(labels, class_count: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(y), class_count))
    out[np.arange(len(y)), y] = 1.0
    return out


def normalize_rows(weights) -> Tensor:
    """Scale each row to sum to one; all-zero rows fall back to uniform weights."""
    w = as_tensor(weights)
    sums = w.data.sum(axis=1, keepdims=True)
    dead = (sums <= 0).ravel()
    if dead.any():
        log.warning("%d neighbour row(s) with zero total weight; using uniform weights", int(dead.sum()))
        fallback = np.zeros(w.shape)
        fallback[dead] = 1.0 / w.shape[1]
        keep = np.where(dead[:, None], 0.0, 1.0)
        safe = np.where(dead[:, None], 1.0, sums)
        return w * keep / Tensor(safe) + Tensor(fallback)
    return w / w.sum(axis=1, keepdims=True)


def reference_rows(G: np.ndarray, ref_index) -> np.ndarray:
    """Rows of G for reference members, with each node's own entry removed."""
    ref_index = np.asarray(ref_index, dtype=np.int64)
    rows = np.array(G[ref_index], dtype=np.float64, copy=True)
    rows[np.arange(len(ref_index)), ref_index] = 0.0
    return rows


def real_distribution(weights: Tensor, u_ref: Tensor, onehot_ref, head: RealDistHead, log_weights: bool = False) -> DiagGaussian:
    """p_theta_r(z_i | neighbours) for a batch of nodes.

    ``weights`` is (B, n_R): one row of neighbour weights per node (a G row with
    the self entry removed for reference members, an A row for M members).
    Rows are normalized, the label-aware messages of the reference nodes are
    averaged with those weights and mapped to a diagonal Gaussian. With
    ``log_weights`` the rows are log-weights and are normalized by softmax,
    which equals dividing the exponentiated row by its sum.
    """
    if as_tensor(u_ref).shape[0] == 0:
        raise ValueError("the reference set is empty")
    w = softmax(as_tensor(weights), axis=1) if log_weights else normalize_rows(weights)
    aggregate = w @ head.messages(u_ref, onehot_ref)
    return head.distribution(aggregate)


def estimated_distribution(u: Tensor, head: EstDistHead) -> DiagGaussian:
    return head(u)


def classify(z: Tensor, u: Tensor, head: ClassifierHead) -> Tensor:
    """Class probabilities softmax(FC([z | u])), one row per sample."""
    return softmax(head.logits(z, u), axis=1)
