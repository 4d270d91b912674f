"""GTNP training: GCN pretraining, paired source/target steps, inference, checkpoints."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import DataError, DomainDataset, normalize, split_train_test, tag_reference
from .embedding import embed
from .graph import bipartite_log_weights, graph_from_features, gcn_forward, pretrain_gcn, symmetric_edge_graph
from .latent import classify, one_hot, real_distribution, reference_rows
from .losses import (
    LossBreakdown,
    LossWeights,
    MmdConfig,
    NumericalAbort,
    TERMS,
    classification_loss,
    distribution_loss,
    mmd_loss,
    total_loss,
)
from .model import Dimensions, GTNPModel, load_model, save_model
from .numerics import (
    DiagGaussian,
    NonFiniteGradientError,
    OptimizerState,
    Tensor,
    kl_diag_gaussians,
    no_grad,
    optimizer_step,
    reparam_sample,
    softmax,
    where,
)
from .numerics.gaussian import InvalidDistributionError, standard_normal_like

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 0.01
    optimizer: str = "rmsprop"
    epochs: int = 30
    n_ref: int = 600
    n_ref_source: int | None = None
    target_train_size: int = 600
    source_train_fraction: float = 0.8
    seed: int = 0
    lambda_mmd: float = 1.0
    amp: float = 0.1
    dims: Dimensions = field(default_factory=Dimensions)
    gcn_epochs: int = 200
    gcn_lr: float = 0.01
    gcn_optimizer: str = "rmsprop"
    gcn_nodes: int = 300
    use_target_labels: bool = True
    emerging: bool = False
    mmd: MmdConfig = field(default_factory=MmdConfig)

    def __post_init__(self):
        if isinstance(self.dims, dict):
            self.dims = Dimensions(**self.dims)
        if isinstance(self.mmd, dict):
            self.mmd = MmdConfig(**self.mmd)
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (MMD needs two samples per domain)")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 0 or self.gcn_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.optimizer.lower() not in ("adam", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            cls_target=1.0 if self.use_target_labels else 0.0,
            mmd=self.lambda_mmd,
            global_kl=self.amp,
        )

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ data prep
def prepare_domains(source: DomainDataset, target: DomainDataset, config: TrainConfig) -> tuple[DomainDataset, DomainDataset]:
    """Train/test split, per-domain z-score on the training portion, R/M tagging.

    Source keeps ``source_train_fraction`` for training; the target keeps
    ``target_train_size`` samples for training and tests on the rest.
    """
    if source.shape != target.shape:
        raise DataError(f"source shape {source.shape} differs from target shape {target.shape}")
    s = split_train_test(source, train_fraction=config.source_train_fraction, seed=[config.seed, 1])
    n_t = min(config.target_train_size, len(target))
    t = split_train_test(target, n_train=n_t, seed=[config.seed, 2])
    s, t = normalize(s), normalize(t)
    n_ref_t = config.n_ref
    n_ref_s = config.n_ref_source if config.n_ref_source is not None else min(config.n_ref, int(s.train_mask.sum()))
    if n_ref_t > int(t.train_mask.sum()):
        raise DataError(f"n_ref={n_ref_t} exceeds the {int(t.train_mask.sum())} target training samples")
    s = tag_reference(s, n_ref_s, seed=[config.seed, 3])
    t = tag_reference(t, n_ref_t, seed=[config.seed, 4])
    return s, t


@dataclass
class DomainData:
    """Arrays of one domain's training portion in the layout the step function needs."""

    X: np.ndarray  # (n_train, H, W)
    y: np.ndarray
    ref_pos: np.ndarray  # index into the R set, -1 for M members
    X_R: np.ndarray
    y_R: np.ndarray
    onehot_R: np.ndarray
    G: np.ndarray
    ids: np.ndarray
    ids_R: np.ndarray

    @property
    def n(self) -> int:
        return len(self.X)

    @property
    def n_ref(self) -> int:
        return len(self.X_R)


def _domain_arrays(ds: DomainDataset, class_count: int, use_labels: bool = True) -> dict:
    train = ds.train()
    is_ref = train.sets == "R"
    ref_pos = np.full(len(train), -1, dtype=np.int64)
    ref_pos[is_ref] = np.arange(int(is_ref.sum()))
    onehot = one_hot(train.labels[is_ref], class_count)
    if not use_labels:
        onehot = np.zeros_like(onehot)
    return dict(
        X=train.X,
        y=train.labels,
        ref_pos=ref_pos,
        X_R=train.X[is_ref],
        y_R=train.labels[is_ref],
        onehot_R=onehot,
        ids=train.ids,
        ids_R=train.ids[is_ref],
    )


class BatchCycler:
    """Endless stream of index batches over ``n`` items, reshuffled on every pass."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise DataError("cannot batch an empty training set")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._queue = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while len(self._queue) < self.batch_size:
            self._queue = np.concatenate([self._queue, self.rng.permutation(self.n)])
        batch, self._queue = self._queue[: self.batch_size], self._queue[self.batch_size :]
        return batch


@dataclass
class TrainState:
    model: GTNPModel
    optimizer: OptimizerState
    config: TrainConfig
    source: DomainData
    target: DomainData
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    gcn_history: list = field(default_factory=list)
    gcn_source: str = ""


# --------------------------------------------------------------- the forward
def _domain_terms(model: GTNPModel, dom: DomainData, pu: DiagGaussian, ref_slice: slice, batch_slice: slice, idx: np.ndarray, u_b: Tensor, rng):
    u_R = pu.mean[ref_slice]
    u_bm = pu.mean[batch_slice]
    ref_pos = dom.ref_pos[idx]
    is_ref = ref_pos >= 0

    # neighbour weights: frozen G rows (self removed) for R members, softmax-normalized A rows for M members
    log_a = bipartite_log_weights(u_bm, u_R, model.bandwidth.tensor())
    g_rows = np.zeros((len(idx), dom.n_ref))
    if is_ref.any():
        rows = reference_rows(dom.G, ref_pos[is_ref])
        sums = rows.sum(axis=1, keepdims=True)
        rows = np.where(sums > 0, rows / np.where(sums > 0, sums, 1.0), 1.0 / dom.n_ref)
        g_rows[is_ref] = rows
    weights = where(is_ref[:, None], Tensor(g_rows), softmax(log_a, axis=1))
    p = real_distribution(weights, u_R, dom.onehot_R, model.real_head)
    q = model.est_head(u_b)
    dist = distribution_loss(q, p)
    z = reparam_sample(q, rng)
    probs = classify(z, u_b, model.classifier)
    cls = classification_loss(probs, dom.y[idx])
    return dist, cls, p, q


def step_losses(model: GTNPModel, source: DomainData, target: DomainData, src_idx, tgt_idx, rng: np.random.Generator, config: TrainConfig) -> LossBreakdown:
    """Build the full objective for one paired step (graph recorded for backward)."""
    src_idx = np.asarray(src_idx)
    tgt_idx = np.asarray(tgt_idx)
    z_g = model.global_latent.sample(rng)
    blocks = [source.X_R, source.X[src_idx], target.X_R, target.X[tgt_idx]]
    bounds = np.cumsum([0] + [len(b) for b in blocks])
    sl = [slice(bounds[i], bounds[i + 1]) for i in range(4)]
    h = embed(model.extractor, np.concatenate(blocks), z_g)
    pu = model.embed_head(h)
    u_b_s = reparam_sample(pu[sl[1]], rng)
    u_b_t = reparam_sample(pu[sl[3]], rng)
    dist_s, cls_s, _, _ = _domain_terms(model, source, pu, sl[0], sl[1], src_idx, u_b_s, rng)
    dist_t, cls_t, _, _ = _domain_terms(model, target, pu, sl[2], sl[3], tgt_idx, u_b_t, rng)
    if not config.use_target_labels:
        cls_t = Tensor(0.0)
    g = model.global_latent.distribution()
    parts = {
        "dist_source": dist_s,
        "dist_target": dist_t,
        "cls_source": cls_s,
        "cls_target": cls_t,
        "mmd": mmd_loss(u_b_s, u_b_t, config.mmd),
        "global_kl": kl_diag_gaussians(g, standard_normal_like(g)),
    }
    return total_loss(parts, config.loss_weights())


def train_step(state: TrainState, src_idx, tgt_idx) -> LossBreakdown:
    """One optimization step; a non-finite loss or gradient leaves ``state`` untouched."""
    params = state.model.trainable_parameters()
    for p in params.values():
        p.grad = None
    rng_backup = state.rng.bit_generator.state
    try:
        breakdown = step_losses(state.model, state.source, state.target, src_idx, tgt_idx, state.rng, state.config)
        breakdown.total_tensor.backward()
        optimizer_step(state.optimizer, params)
    except (NumericalAbort, NonFiniteGradientError, FloatingPointError, InvalidDistributionError) as exc:
        state.rng.bit_generator.state = rng_backup
        for p in params.values():
            p.grad = None
        raise NumericalAbort(f"step {state.step} aborted: {exc}") from exc
    state.step += 1
    for p in params.values():
        p.grad = None
    return breakdown


# -------------------------------------------------------------- deterministic
def deterministic_embeddings(model: GTNPModel, X) -> DiagGaussian:
    h = embed(model.extractor, X, model.global_latent.mean)
    return model.embed_head(h)


def predict_proba(model: GTNPModel, X, chunk: int = 256) -> np.ndarray:
    """u = mean of p(u|h) with z_global at its mean, z = mean of q(z|u)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if tuple(X.shape[1:]) != model.input_shape:
        raise DataError(f"input shape {tuple(X.shape[1:])} does not match model input {model.input_shape}")
    out = []
    with no_grad():
        for start in range(0, len(X), chunk):
            u = deterministic_embeddings(model, X[start : start + chunk]).mean
            z = model.est_head(u).mean
            out.append(classify(z, u, model.classifier).data)
    return np.concatenate(out) if out else np.zeros((0, model.class_count))


def predict(model: GTNPModel, x) -> tuple[int, np.ndarray]:
    probs = predict_proba(model, x)[0]
    return int(np.argmax(probs)), probs


def mean_kl_qp(model: GTNPModel, dom: DomainData, chunk: int = 128) -> float:
    """Deterministic mean KL(q || p) over a domain's training samples."""
    total = 0.0
    with no_grad():
        pu_R = deterministic_embeddings(model, dom.X_R)
        for start in range(0, dom.n, chunk):
            idx = np.arange(start, min(start + chunk, dom.n))
            pu_b = deterministic_embeddings(model, dom.X[idx])
            u_R = pu_R.mean
            ref_pos = dom.ref_pos[idx]
            is_ref = ref_pos >= 0
            log_a = bipartite_log_weights(pu_b.mean, u_R, model.bandwidth.tensor()).data
            a = np.exp(log_a - log_a.max(axis=1, keepdims=True))
            w = a / a.sum(axis=1, keepdims=True)
            if is_ref.any():
                rows = reference_rows(dom.G, ref_pos[is_ref])
                sums = rows.sum(axis=1, keepdims=True)
                w[is_ref] = np.where(sums > 0, rows / np.where(sums > 0, sums, 1.0), 1.0 / dom.n_ref)
            p = real_distribution(Tensor(w), u_R, dom.onehot_R, model.real_head)
            q = model.est_head(pu_b.mean)
            total += float(kl_diag_gaussians(q, p).data.sum())
    return total / dom.n


def global_stats(model: GTNPModel) -> dict:
    g = model.global_latent
    return {"mean_avg": float(g.mean.data.mean()), "var_avg": float(np.exp(g.logvar.data).mean())}


# ------------------------------------------------------------------------ fit
def _check_label_spaces(source: DomainDataset, target: DomainDataset, config: TrainConfig) -> None:
    if source.class_count != target.class_count:
        raise DataError("source and target must share the label space size")
    if not config.emerging:
        missing = sorted(set(range(source.class_count)) - set(int(c) for c in source.train().labels))
        if missing:
            raise DataError(f"classes {missing} are absent from the source training set (enable emerging mode?)")


def pretrain_graphs(model: GTNPModel, source: DomainDataset, target: DomainDataset, config: TrainConfig) -> tuple[np.ndarray, np.ndarray, list, str]:
    """Pretrain the GCN on source samples, then freeze G for both reference sets."""
    src_train = source.train()
    src_ref = src_train.subset(src_train.sets == "R")
    tgt_train = target.train()
    tgt_ref = tgt_train.subset(tgt_train.sets == "R")
    if len(src_ref) == config.gcn_nodes:
        gcn_set, how = src_ref, "source reference set reused"
    else:
        n = min(config.gcn_nodes, len(src_train))
        pick = np.sort(np.random.default_rng([config.seed, 5]).permutation(len(src_train))[:n])
        gcn_set, how = src_train.subset(pick), f"fresh draw of {n} source training samples"
    log.info("GCN pretraining on %s", how)
    with no_grad():
        feats = model.extractor(gcn_set.X).data
        feats_s = model.extractor(src_ref.X).data
        feats_t = model.extractor(tgt_ref.X).data
    history = []
    if config.gcn_epochs > 0:
        res = pretrain_gcn(feats, gcn_set.labels, model.class_count, config.gcn_epochs, config.gcn_lr, config.gcn_optimizer, params=model.gcn)
        history = res.history
    with no_grad():
        G_s = graph_from_features(feats_s, src_ref.labels, model.gcn)
        if config.use_target_labels:
            G_t = graph_from_features(feats_t, tgt_ref.labels, model.gcn)
        else:
            G_t = symmetric_edge_graph(gcn_forward(feats_t, np.zeros((len(tgt_ref), len(tgt_ref))), model.gcn), model.gcn)
    return G_s, G_t, history, how


def init_state(config: TrainConfig, source: DomainDataset, target: DomainDataset) -> TrainState:
    _check_label_spaces(source, target, config)
    if not (source.sets == "R").any():
        source = tag_reference(source, min(config.n_ref, int(source.train_mask.sum())), seed=[config.seed, 3])
    if not (target.sets == "R").any():
        target = tag_reference(target, config.n_ref, seed=[config.seed, 4])
    model = GTNPModel(source.shape, source.class_count, config.dims, seed=config.seed)
    G_s, G_t, history, how = pretrain_graphs(model, source, target, config)
    src = DomainData(**_domain_arrays(source, model.class_count), G=G_s)
    tgt = DomainData(**_domain_arrays(target, model.class_count, config.use_target_labels), G=G_t)
    opt = OptimizerState(method=config.optimizer, learning_rate=config.learning_rate)
    return TrainState(model, opt, config, src, tgt, np.random.default_rng([config.seed, 7]), gcn_history=history, gcn_source=how)


def _epoch_record(state: TrainState, epoch: int, step_losses_: list[LossBreakdown], test: DomainDataset | None) -> dict:
    rec = {
        "epoch": epoch,
        "kl_qp_mean": 0.5 * (mean_kl_qp(state.model, state.source) + mean_kl_qp(state.model, state.target)),
        "global_latent": global_stats(state.model),
        "tau": state.model.bandwidth.tau,
    }
    if step_losses_:
        rec["loss"] = {k: float(np.mean([getattr(b, k) for b in step_losses_])) for k in TERMS + ("total",)}
    else:
        rec["loss"] = None
    if test is not None and len(test):
        pred = predict_proba(state.model, test.X).argmax(axis=1)
        rec["target_test_acc"] = float((pred == test.labels).mean())
    return rec


def fit(config: TrainConfig, source: DomainDataset, target: DomainDataset, trace_path=None) -> tuple[TrainState, dict]:
    """Pretrain the GCN, then run ``config.epochs`` epochs of paired steps.

    ``source``/``target`` must already be split and normalized (see
    :func:`prepare_domains`). Returns the final state and a trace holding one
    record per step and one per epoch (epoch 0 = the initialized model).
    """
    state = init_state(config, source, target)
    target_test = target.test()
    src_cycle = BatchCycler(state.source.n, config.batch_size, np.random.default_rng([config.seed, 21]))
    tgt_cycle = BatchCycler(state.target.n, config.batch_size, np.random.default_rng([config.seed, 22]))
    steps_per_epoch = math.ceil(max(state.source.n, state.target.n) / config.batch_size)
    trace = {"steps": [], "epochs": [_epoch_record(state, 0, [], target_test)], "gcn": state.gcn_history, "gcn_source": state.gcn_source}
    fh = open(trace_path, "w", encoding="utf-8") if trace_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            losses = []
            for k in range(steps_per_epoch):
                b = train_step(state, src_cycle.next(), tgt_cycle.next())
                losses.append(b)
                rec = {
                    "epoch": epoch,
                    "step": state.step,
                    "loss": {name: getattr(b, name) for name in TERMS + ("total",)},
                    "global_latent": global_stats(state.model),
                    "kl_qp_mean": 0.5 * (b.dist_source + b.dist_target),
                }
                trace["steps"].append(rec)
                if fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            state.epoch = epoch
            erec = _epoch_record(state, epoch, losses, target_test)
            trace["epochs"].append(erec)
            log.info("epoch %d: loss %.4f kl %.4f var %.4f acc %s", epoch, erec["loss"]["total"], erec["kl_qp_mean"],
                     erec["global_latent"]["var_avg"], erec.get("target_test_acc"))
    finally:
        if fh:
            fh.close()
    return state, trace


# ----------------------------------------------------------------- checkpoint
def save_state(path, state: TrainState, extra_meta: dict | None = None) -> Path:
    meta = {
        "train_config": state.config.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "reference_ids": {"source": [int(i) for i in state.source.ids_R], "target": [int(i) for i in state.target.ids_R]},
        "reference_labels": {"source": [int(i) for i in state.source.y_R], "target": [int(i) for i in state.target.y_R]},
        **(extra_meta or {}),
    }
    return save_model(path, state.model, {"G_source": state.source.G, "G_target": state.target.G}, meta)


def load_checkpoint(path) -> tuple[GTNPModel, dict, dict]:
    return load_model(path)
