import copy

import numpy as np
import pytest

from gtnp.data import DataError, ShiftDescriptor, SynthConfig, prototype_matrix, synth_generate
from gtnp.losses import NumericalAbort
from gtnp.model import Dimensions, read_arrays
from gtnp.train import (
    BatchCycler,
    TrainConfig,
    fit,
    init_state,
    load_checkpoint,
    predict,
    predict_proba,
    prepare_domains,
    save_state,
    step_losses,
    train_step,
)

SYNTH = SynthConfig(
    class_count=4, shape=(12, 12), samples_per_class=30, noise_std=0.1, shift=ShiftDescriptor(rotation_deg=30, offset=0.5), seed=3
)


def small_config(**kw):
    base = dict(
        batch_size=16, optimizer="adam", epochs=8, n_ref=30, target_train_size=80, gcn_nodes=30, gcn_epochs=20, seed=3,
        dims=Dimensions(16, 4, 16, 16),
    )
    base.update(kw)
    return TrainConfig(**base)


def domains(cfg, synth=SYNTH):
    return prepare_domains(*synth_generate(synth), cfg)


@pytest.fixture(scope="module")
def fitted():
    cfg = small_config()
    s, t = domains(cfg)
    state, trace = fit(cfg, s, t)
    return cfg, s, t, state, trace


def params_copy(model):
    return {k: v.data.copy() for k, v in model.named_parameters().items()}


# --------------------------------------------------------------- train_step
def test_train_step_deterministic():
    cfg = small_config(gcn_epochs=2)
    s, t = domains(cfg)
    a, b = init_state(cfg, s, t), init_state(cfg, s, t)
    idx_s, idx_t = np.arange(16), np.arange(10, 26)
    la, lb = train_step(a, idx_s, idx_t), train_step(b, idx_s, idx_t)
    assert la.as_dict() == lb.as_dict()
    pa, pb = params_copy(a.model), params_copy(b.model)
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_zero_learning_rate_leaves_parameters():
    cfg = small_config(gcn_epochs=2, learning_rate=0.0)
    s, t = domains(cfg)
    state = init_state(cfg, s, t)
    before = params_copy(state.model)
    rng_state = copy.deepcopy(state.rng.bit_generator.state)
    first = train_step(state, np.arange(16), np.arange(16))
    after = params_copy(state.model)
    assert all(np.array_equal(before[k], after[k]) for k in before)
    state.rng.bit_generator.state = rng_state
    again = train_step(state, np.arange(16), np.arange(16))
    assert first.as_dict() == again.as_dict()


def test_fifty_steps_reduce_loss():
    cfg = small_config(gcn_epochs=5)
    s, t = domains(cfg)
    state = init_state(cfg, s, t)
    idx_s, idx_t = np.arange(16), np.arange(16)

    def probe():
        return step_losses(state.model, state.source, state.target, idx_s, idx_t, np.random.default_rng(99), cfg).total

    start = probe()
    cs = BatchCycler(state.source.n, 16, np.random.default_rng(1))
    ct = BatchCycler(state.target.n, 16, np.random.default_rng(2))
    for _ in range(50):
        train_step(state, cs.next(), ct.next())
    assert probe() < start


def test_nonfinite_step_preserves_state():
    cfg = small_config(gcn_epochs=2)
    s, t = domains(cfg)
    state = init_state(cfg, s, t)
    state.model.est_head.dense.bias.data[0] = np.nan
    before = params_copy(state.model)
    rng_state = copy.deepcopy(state.rng.bit_generator.state)
    with pytest.raises(NumericalAbort):
        train_step(state, np.arange(16), np.arange(16))
    after = params_copy(state.model)
    for k in before:
        assert np.array_equal(before[k], after[k], equal_nan=True)
    assert state.rng.bit_generator.state == rng_state
    assert state.step == 0


def test_batch_cycler_covers_every_index():
    c = BatchCycler(10, 4, np.random.default_rng(0))
    seen = np.concatenate([c.next() for _ in range(5)])
    # the first ten indices drawn are one full pass
    assert sorted(seen[:10]) == list(range(10))
    assert sorted(seen[10:20]) == list(range(10))
    with pytest.raises(DataError):
        BatchCycler(0, 4, np.random.default_rng(0))


# ---------------------------------------------------------------------- fit
def test_fit_trace_layout(fitted):
    cfg, s, t, state, trace = fitted
    assert [e["epoch"] for e in trace["epochs"]] == list(range(cfg.epochs + 1))
    assert trace["epochs"][0]["global_latent"] == {"mean_avg": 0.0, "var_avg": 1.0}
    assert trace["epochs"][0]["loss"] is None
    rec = trace["steps"][0]
    assert set(rec) == {"epoch", "step", "loss", "global_latent", "kl_qp_mean"}
    assert len(trace["gcn"]) == cfg.gcn_epochs


def test_fit_kl_decreases(fitted):
    _, _, _, _, trace = fitted
    assert trace["epochs"][-1]["kl_qp_mean"] < trace["epochs"][0]["kl_qp_mean"]


def test_prototype_predicted_after_fit(fitted):
    _, _, t, state, _ = fitted
    for c in range(4):
        x = (prototype_matrix(SYNTH, c) - t.norm_mean) / t.norm_std
        assert predict(state.model, x)[0] == c


def test_predict_deterministic_and_normalized(fitted):
    _, _, t, state, _ = fitted
    x = t.X[0]
    a, b = predict(state.model, x)[1], predict(state.model, x)[1]
    assert np.array_equal(a, b)
    assert abs(a.sum() - 1.0) < 1e-12
    probs = predict_proba(state.model, t.X)
    assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-12
    with pytest.raises(DataError):
        predict_proba(state.model, np.zeros((1, 11, 12)))


def test_checkpoint_round_trip_bitwise(fitted, tmp_path):
    _, _, t, state, _ = fitted
    path = save_state(tmp_path / "ck.bin", state, {"note": "x"})
    model, extras, meta = load_checkpoint(path)
    assert predict_proba(model, t.X).tobytes() == predict_proba(state.model, t.X).tobytes()
    assert np.array_equal(extras["G_source"], state.source.G)
    assert meta["note"] == "x" and meta["epoch"] == 8
    raw = path.read_bytes()
    hlen = int.from_bytes(raw[:8], "little")
    assert b'"format": "gtnp-checkpoint-1"' in raw[8 : 8 + hlen]
    arrays, _ = read_arrays(path)
    assert all(a.dtype == np.float64 for a in arrays.values())


def test_fit_bit_identical_checkpoints(tmp_path):
    cfg = small_config(epochs=2, gcn_epochs=3)
    s, t = domains(cfg)
    a, _ = fit(cfg, s, t)
    b, _ = fit(cfg, s, t)
    pa = save_state(tmp_path / "a.bin", a).read_bytes()
    pb = save_state(tmp_path / "b.bin", b).read_bytes()
    assert pa == pb


def test_zero_epochs_returns_initialized_state():
    cfg = small_config(epochs=0, gcn_epochs=0)
    s, t = domains(cfg)
    state, trace = fit(cfg, s, t)
    assert state.step == 0 and len(trace["epochs"]) == 1 and trace["steps"] == []
    assert 0.0 <= trace["epochs"][0]["target_test_acc"] <= 1.0


def test_target_labels_unused_in_ablation_mode():
    cfg = small_config(epochs=2, gcn_epochs=3, use_target_labels=False)
    s, t = domains(cfg)
    shuffled = copy.deepcopy(t)
    shuffled.labels = np.random.default_rng(0).permutation(t.labels)
    a, _ = fit(cfg, s, t)
    b, _ = fit(cfg, s, shuffled)
    assert predict_proba(a.model, t.X).tobytes() == predict_proba(b.model, t.X).tobytes()
    assert np.all(a.target.onehot_R == 0)


def test_missing_source_class_needs_emerging_mode():
    synth = SynthConfig(class_count=4, shape=(12, 12), samples_per_class=30, emerging_class=True, seed=3)
    cfg = small_config(epochs=1, gcn_epochs=2)
    s, t = domains(cfg, synth)
    with pytest.raises(DataError, match="emerging"):
        fit(cfg, s, t)
    cfg = small_config(epochs=1, gcn_epochs=2, emerging=True)
    state, _ = fit(cfg, s, t)
    assert state.model.class_count == 4


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")
    with pytest.raises(DataError):
        domains(small_config(n_ref=500))
