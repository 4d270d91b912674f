"""Reference-set dependency graphs.

``G`` (R x R) comes from a GCN pretrained on labelled source samples and is
frozen afterwards; ``A`` (M x R) is an RBF-style bipartite graph recomputed from
the live embeddings at every step with a trainable bandwidth ``tau``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .layers import Dense, Module
from .numerics import OptimizerState, Tensor, as_tensor, log_softmax, optimizer_step, parameter

log = logging.getLogger(__name__)

GCN_HIDDEN = 64


def label_adjacency(labels) -> np.ndarray:
    """1 where two reference samples share a label (diagonal included), else 0."""
    y = np.asarray(labels).reshape(-1)
    if y.size == 0:
        raise ValueError("label_adjacency needs at least one label")
    return (y[:, None] == y[None, :]).astype(np.float64)


def normalized_adjacency(adjacency: np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2; self-loops guarantee every degree is positive."""
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    a_hat = a + np.eye(len(a))
    d = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return d[:, None] * a_hat * d[None, :]


class GcnParams(Module):
    """Two graph-convolution layers plus node-classification and edge-weight heads.

    The edge head maps the concatenated pair ``[u_i | u_j]`` through one hidden
    ReLU layer to a sigmoid weight.
    """

    def __init__(self, d_in: int, class_count: int, rng: np.random.Generator, hidden: int = GCN_HIDDEN):
        self.layer0 = Dense(d_in, hidden, rng)
        self.layer1 = Dense(hidden, hidden, rng)
        self.node_head = Dense(hidden, class_count, rng, gain=0.5)
        self.edge_hidden = Dense(2 * hidden, hidden, rng)
        self.edge_out = Dense(hidden, 1, rng, gain=0.5)
        self.hidden = hidden

    @property
    def layers(self) -> list[Dense]:
        return [self.layer0, self.layer1]


def gcn_forward(node_features, adjacency: np.ndarray, params: GcnParams, normalize: bool = True) -> Tensor:
    """Stacked ``act(A_bar U W + b)`` layers; ReLU between layers, identity after the last."""
    u = as_tensor(node_features)
    adjacency = np.asarray(adjacency, dtype=np.float64)
    if adjacency.shape != (u.shape[0], u.shape[0]):
        raise ValueError(f"adjacency {adjacency.shape} does not match {u.shape[0]} nodes")
    a_bar = Tensor(normalized_adjacency(adjacency) if normalize else adjacency)
    for k, layer in enumerate(params.layers):
        u = a_bar @ u @ layer.weight + layer.bias
        if k < len(params.layers) - 1:
            u = u.relu()
    return u


def edge_logits(u: Tensor, params: GcnParams) -> Tensor:
    """Directed edge logits for every ordered pair; entry (i, j) scores ``[u_i | u_j]``."""
    n, d = u.shape
    w = params.edge_hidden.weight
    left = u @ w[:d]
    right = u @ w[d:]
    hid = (left.reshape(n, 1, -1) + right.reshape(1, n, -1) + params.edge_hidden.bias).relu()
    out = hid.reshape(n * n, -1) @ params.edge_out.weight + params.edge_out.bias
    return out.reshape(n, n)


def edge_weight(u_i, u_j, params: GcnParams) -> float:
    pair = np.concatenate([np.asarray(u_i, dtype=np.float64).ravel(), np.asarray(u_j, dtype=np.float64).ravel()])
    hid = np.maximum(pair @ params.edge_hidden.weight.data + params.edge_hidden.bias.data, 0.0)
    z = float(hid @ params.edge_out.weight.data[:, 0] + params.edge_out.bias.data[0])
    return float(1.0 / (1.0 + np.exp(-z))) if z >= 0 else float(np.exp(z) / (1.0 + np.exp(z)))


def symmetric_edge_graph(u: Tensor, params: GcnParams) -> np.ndarray:
    """G[i, j] = (w(i, j) + w(j, i)) / 2."""
    w = edge_logits(u, params).sigmoid().data
    return 0.5 * (w + w.T)


def graph_from_features(features, labels, params: GcnParams) -> np.ndarray:
    """Run a (frozen) GCN over a labelled reference set and return its edge-weight graph."""
    return symmetric_edge_graph(gcn_forward(features, label_adjacency(labels), params), params)


def pair_logits(u: Tensor, params: GcnParams, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Edge logits for the ordered pairs (rows[k], cols[k])."""
    d = u.shape[1]
    w = params.edge_hidden.weight
    hid = ((u @ w[:d])[rows] + (u @ w[d:])[cols] + params.edge_hidden.bias).relu()
    return (hid @ params.edge_out.weight + params.edge_out.bias).reshape(-1)


def off_diagonal_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.nonzero(1.0 - np.eye(n))
    return rows, cols


def pretrain_losses(features, labels, params: GcnParams, pairs: tuple[np.ndarray, np.ndarray] | None = None):
    """Node cross-entropy and edge BCE against the label adjacency.

    ``pairs`` restricts the edge term to a subset of ordered off-diagonal pairs
    (all of them by default).
    """
    y = np.asarray(labels, dtype=np.int64)
    target = label_adjacency(y)
    u = gcn_forward(features, target, params)
    logits = params.node_head(u)
    node_ce = -(log_softmax(logits, axis=1)[np.arange(len(y)), y]).mean()
    rows, cols = off_diagonal_pairs(len(y)) if pairs is None else pairs
    if len(rows) == 0:
        return node_ce, Tensor(0.0), logits
    s = pair_logits(u, params, rows, cols)
    # binary cross-entropy with logits
    edge_bce = (s.softplus() - s * target[rows, cols]).mean()
    return node_ce, edge_bce, logits


@dataclass
class PretrainResult:
    params: GcnParams
    G: np.ndarray
    history: list


def pretrain_gcn(
    features,
    labels,
    class_count: int,
    epochs: int = 200,
    lr: float = 0.01,
    optimizer: str = "rmsprop",
    seed: int = 0,
    params: GcnParams | None = None,
    pairs_per_epoch: int | None = 4096,
) -> PretrainResult:
    """Fit the GCN on one labelled reference set with node CE + edge BCE (equal weights).

    Returns the trained parameters, the symmetrized edge-weight graph over the
    same nodes and a per-epoch history of (loss, node accuracy, edge BCE).
    Each epoch scores ``pairs_per_epoch`` randomly drawn ordered pairs in the
    edge term (every pair when None or when there are fewer pairs).
    """
    features = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("GCN pretraining needs at least two classes among the reference samples")
    if params is None:
        params = GcnParams(features.shape[1], class_count, np.random.default_rng(seed))
    opt = OptimizerState(method=optimizer, learning_rate=lr)
    named = params.named_parameters()
    history = []
    all_rows, all_cols = off_diagonal_pairs(len(y))
    pair_rng = np.random.default_rng([seed, 31])
    for epoch in range(epochs):
        for p in named.values():
            p.grad = None
        pairs = (all_rows, all_cols)
        if pairs_per_epoch is not None and pairs_per_epoch < len(all_rows):
            pick = pair_rng.choice(len(all_rows), size=pairs_per_epoch, replace=False)
            pairs = (all_rows[pick], all_cols[pick])
        node_ce, edge_bce, logits = pretrain_losses(features, y, params, pairs)
        loss = node_ce + edge_bce
        loss.backward()
        optimizer_step(opt, named)
        acc = float((logits.data.argmax(axis=1) == y).mean())
        history.append({"epoch": epoch + 1, "loss": loss.item(), "node_acc": acc, "edge_bce": edge_bce.item()})
    G = graph_from_features(features, y, params)
    return PretrainResult(params, G, history)


# ------------------------------------------------------------------- bipartite
def bipartite_weight(u_i, u_j, tau: float) -> float:
    d = np.asarray(u_i, dtype=np.float64) - np.asarray(u_j, dtype=np.float64)
    return float(np.exp(-0.5 * tau * float(d @ d)))


class Bandwidth(Module):
    """tau = exp(log_tau), initialised to 1."""

    def __init__(self, tau: float = 1.0):
        self.log_tau = parameter(np.array([np.log(tau)]))

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.data[0]))

    def tensor(self) -> Tensor:
        return self.log_tau.exp()


def squared_distances(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    diff = a.reshape(a.shape[0], 1, a.shape[1]) - b.reshape(1, b.shape[0], b.shape[1])
    return (diff * diff).sum(axis=2)


def bipartite_log_weights(u_m: Tensor, u_r: Tensor, tau: Tensor) -> Tensor:
    return squared_distances(u_m, u_r) * (as_tensor(tau).reshape(1, 1) * -0.5)


def build_bipartite(u_m, u_r, tau) -> Tensor:
    """A[k, j] = exp(-(tau / 2) ||u_k - u_j||^2) between M rows and R columns."""
    u_m, u_r = as_tensor(u_m), as_tensor(u_r)
    if u_r.shape[0] == 0:
        raise ValueError("the reference set is empty")
    if u_m.shape[0] == 0:
        return Tensor(np.zeros((0, u_r.shape[0])))
    return bipartite_log_weights(u_m, u_r, as_tensor(tau)).exp()


@dataclass
class DependencyGraphs:
    G: np.ndarray
    A: np.ndarray
    tau: float

    def check(self) -> None:
        if not np.allclose(self.G, self.G.T, atol=0.0):
            raise ValueError("G is not symmetric")
        for name, m in (("G", self.G), ("A", self.A)):
            if not np.all(np.isfinite(m)):
                raise ValueError(f"{name} contains non-finite weights")
        if np.any(self.G < 0) or np.any(self.G > 1):
            raise ValueError("G weights must lie in [0, 1]")
        if self.A.size and (np.any(self.A <= 0) or np.any(self.A > 1)):
            raise ValueError("A weights must lie in (0, 1]")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
