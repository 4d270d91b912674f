import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gtnp.latent import one_hot
from gtnp.losses import (
    LossWeights,
    MmdConfig,
    NumericalAbort,
    classification_loss,
    distribution_loss,
    median_sigma,
    mmd_loss,
    total_loss,
)
from gtnp.model import Dimensions, GTNPModel
from gtnp.numerics import DiagGaussian, Tensor, gradient_check, parameter, softmax
from gtnp.train import DomainData, TrainConfig, step_losses


def gauss(mean, logvar):
    return DiagGaussian(Tensor(np.asarray(mean, float)), Tensor(np.asarray(logvar, float)))


def mmd_double_loop(a, b, sigma):
    def k(x, y):
        return math.exp(-float(((x - y) ** 2).sum()) / (2 * sigma * sigma))

    n, m = len(a), len(b)
    ss = sum(k(a[i], a[j]) for i in range(n) for j in range(n)) / (n * n)
    tt = sum(k(b[i], b[j]) for i in range(m) for j in range(m)) / (m * m)
    st_ = sum(k(a[i], b[j]) for i in range(n) for j in range(m)) / (n * m)
    return ss - 2 * st_ + tt


# --------------------------------------------------------------- distribution
def test_distribution_loss_identical_is_zero():
    q = gauss(np.random.default_rng(0).normal(size=(4, 3)), np.zeros((4, 3)))
    assert distribution_loss(q, q).item() == 0.0


def test_distribution_loss_unit_shift():
    assert abs(distribution_loss(gauss([[0.0]], [[0.0]]), gauss([[1.0]], [[0.0]])).item() - 0.5) < 1e-15


def test_distribution_loss_monte_carlo_oracle():
    q, p = gauss([[0.3, -1.0]], [[0.2, -0.4]]), gauss([[-0.5, 0.1]], [[0.5, 0.3]])
    rng = np.random.default_rng(0)
    qm, qs = q.mean.data[0], np.exp(0.5 * q.logvar.data[0])
    pm, pv = p.mean.data[0], np.exp(p.logvar.data[0])
    z = qm + qs * rng.standard_normal((1_000_000, 2))
    log_q = -0.5 * (((z - qm) / qs) ** 2 + q.logvar.data[0])
    log_p = -0.5 * ((z - pm) ** 2 / pv + p.logvar.data[0])
    mc = float((log_q - log_p).sum(axis=1).mean())
    assert abs(distribution_loss(q, p).item() - mc) < 5e-3


def test_distribution_loss_duplication_invariant():
    rng = np.random.default_rng(1)
    q = gauss(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    p = gauss(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    q2 = gauss(np.tile(q.mean.data, (2, 1)), np.tile(q.logvar.data, (2, 1)))
    p2 = gauss(np.tile(p.mean.data, (2, 1)), np.tile(p.logvar.data, (2, 1)))
    assert abs(distribution_loss(q, p).item() - distribution_loss(q2, p2).item()) < 1e-14


def test_distribution_loss_dimension_mismatch():
    with pytest.raises(ValueError):
        distribution_loss(gauss([[0.0, 0.0]], [[0.0, 0.0]]), gauss([[0.0]], [[0.0]]))


# -------------------------------------------------------------- classification
def test_classification_examples():
    assert classification_loss(np.eye(3), [0, 1, 2]).item() < 1e-10
    assert abs(classification_loss(np.full((5, 10), 0.1), [0, 3, 9, 2, 2]).item() - 2.302585) < 1e-6
    assert abs(classification_loss([[0.5, 0.5]], [1]).item() - 0.693147) < 1e-6


def test_classification_floor_and_errors():
    assert abs(classification_loss([[1.0, 0.0]], [1]).item() + math.log(1e-12)) < 1e-9
    with pytest.raises(ValueError):
        classification_loss([[0.5, 0.5]], [2])
    with pytest.raises(ValueError):
        classification_loss([[0.5, 0.5]], [0, 1])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 5), st.integers(0, 2**16))
def test_classification_non_negative(n, c, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(c), size=n)
    assert classification_loss(p, rng.integers(0, c, n)).item() >= 0.0


# ------------------------------------------------------------------------ mmd
def test_mmd_same_multiset_is_zero():
    x = np.random.default_rng(0).normal(size=(10, 4))
    assert abs(mmd_loss(x, x).item()) < 1e-12
    assert abs(mmd_loss(x, x[::-1]).item()) < 1e-12


def test_mmd_matches_double_loop_50x8():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(50, 8)), rng.normal(loc=0.4, size=(50, 8))
    sigma = median_sigma(np.concatenate([a, b]))
    assert abs(mmd_loss(a, b).item() - mmd_double_loop(a, b, sigma)) < 1e-10


def test_mmd_matches_double_loop_random_instances():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n, m, d = rng.integers(2, 20), rng.integers(2, 20), rng.integers(1, 9)
        a = rng.normal(size=(n, d))
        b = rng.normal(loc=rng.normal(), scale=rng.uniform(0.5, 2), size=(m, d))
        sigma = float(rng.uniform(0.3, 3.0))
        got = mmd_loss(a, b, MmdConfig("fixed", sigma)).item()
        assert abs(got - mmd_double_loop(a, b, sigma)) < 1e-10


def test_mmd_large_offset_fixed_sigma():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(12, 4))
    b = a + 10.0
    got = mmd_loss(a, b, MmdConfig("fixed", 1.0)).item()
    K = np.exp(-((a[:, None] - a[None]) ** 2).sum(-1) / 2)
    # within-set kernels agree because the target set is a translate
    assert abs(got - 2 * K.mean()) < 1e-6


def test_mmd_errors():
    with pytest.raises(ValueError):
        mmd_loss(np.zeros((1, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        mmd_loss(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        MmdConfig("fixed", 0.0)


def test_median_sigma_floor():
    assert median_sigma(np.zeros((4, 3))) == 1e-6


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12), st.integers(1, 5), st.integers(0, 2**16))
def test_mmd_non_negative_and_permutation_invariant(n, m, d, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, d)), rng.normal(size=(m, d)) * 2
    v = mmd_loss(a, b).item()
    assert v >= -1e-12
    w = mmd_loss(a[rng.permutation(n)], b[rng.permutation(m)]).item()
    assert abs(v - w) < 1e-12


def test_mmd_gradcheck_fixed_sigma():
    rng = np.random.default_rng(4)
    a, b = parameter(rng.normal(size=(4, 3))), parameter(rng.normal(size=(5, 3)))
    assert gradient_check(lambda: mmd_loss(a, b, MmdConfig("fixed", 1.3)), [a, b]) < 1e-4


def test_classification_gradcheck():
    rng = np.random.default_rng(5)
    logits = parameter(rng.normal(size=(4, 3)))
    assert gradient_check(lambda: classification_loss(softmax(logits, axis=1), [0, 2, 1, 1]), [logits]) < 1e-4


def test_distribution_loss_gradcheck():
    rng = np.random.default_rng(6)
    ps = [parameter(rng.normal(size=(4, 8))) for _ in range(4)]
    fn = lambda: distribution_loss(DiagGaussian(ps[0], ps[1]), DiagGaussian(ps[2], ps[3]))  # noqa: E731
    assert gradient_check(fn, ps) < 1e-4


# ---------------------------------------------------------------------- total
def test_total_loss_examples():
    assert total_loss({}).total == 0.0
    parts = dict(dist_source=1, dist_target=1, cls_source=1, cls_target=1, mmd=1, global_kl=0)
    assert total_loss(parts).total == 5.0
    parts["global_kl"] = 3.0
    b = total_loss(parts, LossWeights(global_kl=0.0))
    assert b.total == 5.0 and b.global_kl == 3.0


def test_total_loss_weighted_sum():
    rng = np.random.default_rng(7)
    parts = {k: float(v) for k, v in zip(LossWeights().__dict__, rng.uniform(0, 3, 6))}
    w = LossWeights(*rng.uniform(0, 2, 6))
    b = total_loss(parts, w)
    assert abs(b.total - sum(parts[k] * getattr(w, k) for k in parts)) < 1e-10
    assert set(b.as_dict()) >= {"total", "weights", "mmd"}


def test_total_loss_names_nonfinite_term():
    with pytest.raises(NumericalAbort, match="cls_target"):
        total_loss({"cls_target": float("nan")})


def tiny_domain(rng, n_ref, n_m, classes, shape):
    n = n_ref + n_m
    X = rng.normal(size=(n, *shape))
    y = rng.integers(0, classes, n)
    ref_pos = np.full(n, -1)
    ref_pos[:n_ref] = np.arange(n_ref)
    G = rng.uniform(0.1, 1.0, size=(n_ref, n_ref))
    G = 0.5 * (G + G.T)
    return DomainData(X, y, ref_pos, X[:n_ref], y[:n_ref], one_hot(y[:n_ref], classes), G, np.arange(n), np.arange(n_ref))


def test_full_objective_gradcheck():
    """Every term of the step objective on a 4-sample micro-batch with 8-dim latents."""
    rng = np.random.default_rng(8)
    dims = Dimensions(d_f=4, d_g=2, d_u=8, d_z=8)
    model = GTNPModel((10, 10), 3, dims, seed=1)
    src = tiny_domain(rng, 3, 3, 3, (10, 10))
    tgt = tiny_domain(rng, 3, 3, 3, (10, 10))
    cfg = TrainConfig(batch_size=4, dims=dims, mmd=MmdConfig("fixed", 2.0))
    src_idx, tgt_idx = np.array([0, 4, 2, 5]), np.array([3, 1, 5, 0])
    m = model
    # move the global latent off its prior so its KL term is active
    m.global_latent.mean.data[...] = [0.3, -0.2]
    m.global_latent.logvar.data[...] = [-0.1, 0.2]
    params = [
        m.global_latent.mean,
        m.global_latent.logvar,
        m.bandwidth.log_tau,
        m.extractor.dense.bias,
        m.embed_head.dense.bias,
        m.real_head.output.bias,
        m.real_head.message.bias,
        m.est_head.dense.bias,
        m.classifier.dense.weight,
    ]

    def fn():
        return step_losses(model, src, tgt, src_idx, tgt_idx, np.random.default_rng(3), cfg).total_tensor

    b = step_losses(model, src, tgt, src_idx, tgt_idx, np.random.default_rng(3), cfg)
    assert all(getattr(b, k) > 0 for k in ("dist_source", "dist_target", "cls_source", "cls_target", "mmd", "global_kl"))
    assert gradient_check(fn, params) < 1e-4
