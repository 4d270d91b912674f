import numpy as np
import pytest

from gtnp.latent import (
    ClassifierHead,
    EstDistHead,
    RealDistHead,
    classify,
    estimated_distribution,
    normalize_rows,
    one_hot,
    real_distribution,
    reference_rows,
)
from gtnp.numerics import Tensor, gradient_check, kl_diag_gaussians, parameter

D_U, PSI, D_Z = 6, 3, 5


@pytest.fixture
def real_head():
    return RealDistHead(D_U, PSI, np.random.default_rng(0), d_z=D_Z)


def refs(n, seed=1):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, D_U)), one_hot(rng.integers(0, PSI, n), PSI)


# --------------------------------------------------------------- real dist
def test_single_neighbour_gets_full_weight(real_head):
    u, oh = refs(1)
    p = real_distribution(Tensor([[0.37]]), u, oh, real_head)
    direct = real_head.distribution(real_head.messages(u, oh))
    assert np.array_equal(p.mean.data, direct.mean.data)
    assert np.array_equal(p.logvar.data, direct.logvar.data)


def test_duplicate_neighbours_equal_one(real_head):
    u, oh = refs(1)
    one = real_distribution(Tensor([[1.0]]), u, oh, real_head)
    two = real_distribution(Tensor([[0.4, 0.4]]), np.repeat(u, 2, 0), np.repeat(oh, 2, 0), real_head)
    assert np.allclose(one.mean.data, two.mean.data, atol=1e-15)
    assert np.allclose(one.logvar.data, two.logvar.data, atol=1e-15)


def test_weighted_aggregate_manual(real_head):
    u, oh = refs(2)
    m = real_head.messages(u, oh).data
    captured = {}
    original = real_head.distribution

    def spy(agg):
        captured["agg"] = agg.data
        return original(agg)

    real_head.distribution = spy
    real_distribution(Tensor([[0.2, 0.8]]), u, oh, real_head)
    assert np.abs(captured["agg"][0] - (0.2 * m[0] + 0.8 * m[1])).max() < 1e-12


def test_log_weight_rows_equal_normalized_weights(real_head):
    u, oh = refs(4)
    w = np.array([[0.1, 0.5, 0.2, 0.9], [1e-3, 1.0, 0.3, 0.3]])
    a = real_distribution(Tensor(w), u, oh, real_head)
    b = real_distribution(Tensor(np.log(w)), u, oh, real_head, log_weights=True)
    assert np.allclose(a.mean.data, b.mean.data, atol=1e-12)


def test_zero_row_falls_back_to_uniform(real_head, caplog):
    u, oh = refs(3)
    with caplog.at_level("WARNING"):
        w = normalize_rows(Tensor(np.array([[0.0, 0.0, 0.0], [1.0, 3.0, 0.0]])))
    assert np.allclose(w.data, [[1 / 3] * 3, [0.25, 0.75, 0.0]])
    assert "uniform" in caplog.text
    p = real_distribution(Tensor(np.zeros((1, 3))), u, oh, real_head)
    q = real_distribution(Tensor(np.ones((1, 3))), u, oh, real_head)
    assert np.allclose(p.mean.data, q.mean.data, atol=1e-14)


def test_reference_rows_remove_self():
    G = np.full((3, 3), 0.5)
    rows = reference_rows(G, [2, 0])
    assert rows.tolist() == [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5]]
    assert np.all(G == 0.5)


def test_empty_reference_set(real_head):
    with pytest.raises(ValueError):
        real_distribution(Tensor(np.zeros((1, 0))), np.zeros((0, D_U)), np.zeros((0, PSI)), real_head)


def test_real_distribution_gradcheck(real_head):
    rng = np.random.default_rng(2)
    u = parameter(rng.normal(size=(3, D_U)))
    w = parameter(rng.uniform(0.1, 1.0, size=(2, 3)))
    oh = one_hot([0, 2, 1], PSI)

    def fn():
        p = real_distribution(w, u, oh, real_head)
        return (p.mean * p.mean).sum() + p.logvar.sum()

    assert gradient_check(fn, [u, w, real_head.message.weight, real_head.output.bias]) < 1e-4


def test_labels_of_non_neighbours_are_ignored(real_head):
    # a reference node with zero weight cannot influence the distribution
    u, oh = refs(3)
    w = Tensor([[0.5, 0.5, 0.0]])
    a = real_distribution(w, u, oh, real_head)
    oh2 = oh.copy()
    oh2[2] = np.roll(oh2[2], 1)
    b = real_distribution(w, u, oh2, real_head)
    assert np.array_equal(a.mean.data, b.mean.data)


# ---------------------------------------------------------------- est dist
def test_estimated_identical_inputs():
    head = EstDistHead(D_U, np.random.default_rng(0), d_z=D_Z)
    u = np.tile(np.random.default_rng(1).normal(size=D_U), (2, 1))
    q = estimated_distribution(Tensor(u), head)
    assert np.array_equal(q.mean.data[0], q.mean.data[1])


def test_estimated_affine_and_clamped():
    head = EstDistHead(D_U, np.random.default_rng(0), d_z=2)
    head.dense.weight.data[...] = 0.0
    head.dense.bias.data[...] = [1.5, -0.5, 20.0, 0.25]
    q = head(Tensor(np.random.default_rng(1).normal(size=(3, D_U))))
    assert np.all(q.mean.data == [1.5, -0.5])
    assert np.all(q.logvar.data == [10.0, 0.25])


# ---------------------------------------------------------------- classify
def test_classify_zero_weights_uniform():
    head = ClassifierHead(D_Z, D_U, 4, np.random.default_rng(0))
    head.dense.weight.data[...] = 0.0
    p = classify(Tensor(np.ones((2, D_Z))), Tensor(np.ones((2, D_U))), head)
    assert np.allclose(p.data, 0.25, atol=1e-15)


def test_classify_saturation_and_sum():
    head = ClassifierHead(D_Z, D_U, 4, np.random.default_rng(0))
    head.dense.weight.data[...] = 0.0
    head.dense.bias.data[...] = [10.0, 0.0, 0.0, 0.0]
    p = classify(Tensor(np.zeros((1, D_Z))), Tensor(np.zeros((1, D_U))), head).data
    assert p.argmax() == 0 and p[0, 0] > 0.99
    rng = np.random.default_rng(3)
    head = ClassifierHead(D_Z, D_U, 4, rng)
    p = classify(Tensor(rng.normal(size=(50, D_Z)) * 5), Tensor(rng.normal(size=(50, D_U)) * 5), head).data
    assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-12
    assert p.min() > 0


def test_batch_permutation_equivariance():
    rng = np.random.default_rng(4)
    est = EstDistHead(D_U, rng, d_z=D_Z)
    clf = ClassifierHead(D_Z, D_U, PSI, rng)
    u = rng.normal(size=(6, D_U))
    perm = rng.permutation(6)

    def run(x):
        q = est(Tensor(x))
        return q.mean.data, classify(q.mean, Tensor(x), clf).data

    (m1, p1), (m2, p2) = run(u), run(u[perm])
    assert np.allclose(m1[perm], m2, atol=1e-14)
    assert np.allclose(p1[perm], p2, atol=1e-14)


def test_kl_finite_at_clamp_bounds():
    rng = np.random.default_rng(5)
    est = EstDistHead(D_U, rng, d_z=D_Z)
    est.dense.bias.data[D_Z:] = 1e6
    real = RealDistHead(D_U, PSI, rng, d_z=D_Z)
    real.output.bias.data[D_Z:] = -1e6
    u, oh = refs(2)
    q = est(Tensor(u))
    p = real_distribution(Tensor(np.ones((2, 2))), u, oh, real)
    kl = kl_diag_gaussians(q, p).data
    assert np.all(np.isfinite(kl))
