"""Distribution (KL), classification (cross-entropy) and MMD loss terms."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import DiagGaussian, Tensor, as_tensor, concat, kl_diag_gaussians

PROB_FLOOR = 1e-12
SIGMA_FLOOR = 1e-6
TERMS = ("dist_source", "dist_target", "cls_source", "cls_target", "mmd", "global_kl")


class NumericalAbort(FloatingPointError):
    """A loss term or update went non-finite; the step was not applied."""


@dataclass
class MmdConfig:
    bandwidth: str = "median"  # "median" or "fixed"
    sigma: float = 1.0

    def __post_init__(self):
        if self.bandwidth not in ("median", "fixed"):
            raise ValueError("bandwidth must be 'median' or 'fixed'")
        if self.bandwidth == "fixed" and not self.sigma > 0:
            raise ValueError("fixed sigma must be positive")


@dataclass
class LossWeights:
    dist_source: float = 1.0
    dist_target: float = 1.0
    cls_source: float = 1.0
    cls_target: float = 1.0
    mmd: float = 1.0
    global_kl: float = 0.1


@dataclass
class LossBreakdown:
    dist_source: float
    dist_target: float
    cls_source: float
    cls_target: float
    mmd: float
    global_kl: float
    total: float
    weights: LossWeights = field(default_factory=LossWeights)
    total_tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in TERMS + ("total",)}
        d["weights"] = asdict(self.weights)
        return d


def distribution_loss(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """Batch mean of KL(q_i || p_i)."""
    kl = kl_diag_gaussians(q, p)
    return kl.mean() if kl.ndim else kl


def classification_loss(probs, labels) -> Tensor:
    """-(1/N) sum_i log p_i[y_i], with probabilities floored at 1e-12."""
    probs = as_tensor(probs)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(y) != probs.shape[0]:
        raise ValueError("label count does not match prediction rows")
    if y.size and (y.min() < 0 or y.max() >= probs.shape[1]):
        raise ValueError(f"labels must lie in [0, {probs.shape[1]})")
    picked = probs[np.arange(len(y)), y].clip(PROB_FLOOR, 1.0)
    return -(picked.log().mean())


def cross_entropy_from_log_probs(log_probs: Tensor, labels) -> Tensor:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    picked = log_probs[np.arange(len(y)), y].clip(np.log(PROB_FLOOR), 0.0)
    return -(picked.mean())


def pairwise_sq_dists(z: Tensor) -> Tensor:
    n, d = z.shape
    diff = z.reshape(n, 1, d) - z.reshape(1, n, d)
    return (diff * diff).sum(axis=2)


def median_sigma(z: np.ndarray) -> float:
    z = np.asarray(z, dtype=np.float64)
    sq = ((z[:, None, :] - z[None, :, :]) ** 2).sum(axis=2)
    iu = np.triu_indices(len(z), k=1)
    sigma = float(np.sqrt(np.median(sq[iu]))) if iu[0].size else 0.0
    return max(sigma, SIGMA_FLOOR)


def mmd_weight_matrix(n_s: int, n_t: int) -> np.ndarray:
    M = np.empty((n_s + n_t, n_s + n_t))
    M[:n_s, :n_s] = 1.0 / (n_s * n_s)
    M[n_s:, n_s:] = 1.0 / (n_t * n_t)
    M[:n_s, n_s:] = -1.0 / (n_s * n_t)
    M[n_s:, :n_s] = -1.0 / (n_s * n_t)
    return M


def mmd_loss(u_s, u_t, config: MmdConfig | None = None) -> Tensor:
    """Biased MMD^2 between two embedding sets as tr(K M) over the pooled Gram matrix.

    The median-heuristic bandwidth is computed from the pooled batch and held
    constant for differentiation.
    """
    config = config or MmdConfig()
    u_s, u_t = as_tensor(u_s), as_tensor(u_t)
    if u_s.shape[0] < 2 or u_t.shape[0] < 2:
        raise ValueError("MMD needs at least two samples per domain")
    if u_s.shape[1] != u_t.shape[1]:
        raise ValueError("MMD inputs must share their embedding dimension")
    z = concat([u_s, u_t], axis=0)
    sigma = median_sigma(z.data) if config.bandwidth == "median" else float(config.sigma)
    K = (pairwise_sq_dists(z) * (-1.0 / (2.0 * sigma * sigma))).exp()
    M = mmd_weight_matrix(u_s.shape[0], u_t.shape[0])
    return (K * M).sum()


def total_loss(parts: dict, weights: LossWeights | None = None) -> LossBreakdown:
    """Weighted sum of the six terms; refuses to proceed past a non-finite term."""
    weights = weights or LossWeights()
    values = {}
    total = None
    for name in TERMS:
        part = parts.get(name, 0.0)
        t = as_tensor(part)
        v = float(t.data)
        if not np.isfinite(v):
            raise NumericalAbort(f"loss term {name!r} is not finite ({v})")
        values[name] = v
        w = getattr(weights, name)
        if w == 0.0:
            continue
        term = t * w
        total = term if total is None else total + term
    total = Tensor(0.0) if total is None else total
    return LossBreakdown(**values, total=float(total.data), weights=weights, total_tensor=total)
