"""Comparison classifiers: source-only and MMD-only feature alignment.

Both reuse the GTNP feature extractor with a dense softmax head on top, train
on the same prepared splits and draw batches from identically seeded cyclers.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .data import DataError, DomainDataset
from .embedding import FeatureExtractor
from .layers import Dense, Module
from .losses import MmdConfig, NumericalAbort, cross_entropy_from_log_probs, mmd_loss
from .metrics import compute_metrics
from .numerics import NonFiniteGradientError, OptimizerState, log_softmax, no_grad, optimizer_step, softmax
from .train import BatchCycler

log = logging.getLogger(__name__)

VARIANTS = ("source_only", "mmd_only")


@dataclass
class BaselineConfig:
    variant: str = "source_only"
    batch_size: int = 32
    learning_rate: float = 0.01
    optimizer: str = "rmsprop"
    epochs: int = 30
    seed: int = 0
    lambda_mmd: float = 1.0
    d_f: int = 48
    mmd: MmdConfig | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if isinstance(self.mmd, dict):
            self.mmd = MmdConfig(**self.mmd)

    @classmethod
    def from_train_config(cls, variant: str, config) -> "BaselineConfig":
        return cls(
            variant=variant,
            batch_size=config.batch_size,
            learning_rate=config.learning_rate,
            optimizer=config.optimizer,
            epochs=config.epochs,
            seed=config.seed,
            lambda_mmd=config.lambda_mmd,
            d_f=config.dims.d_f,
            mmd=config.mmd,
        )


class BaselineClassifier(Module):
    def __init__(self, input_shape, class_count: int, d_f: int = 48, seed: int = 0):
        rng = np.random.default_rng([seed, 11])
        self.extractor = FeatureExtractor(tuple(input_shape), rng, d_f)
        self.head = Dense(d_f, class_count, rng, gain=0.5)
        self.class_count = class_count

    def logits(self, X):
        return self.head(self.extractor(X))

    def predict_proba(self, X, chunk: int = 256) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if tuple(X.shape[1:]) != self.extractor.input_shape:
            raise DataError(f"input shape {tuple(X.shape[1:])} does not match model input {self.extractor.input_shape}")
        with no_grad():
            parts = [softmax(self.logits(X[i : i + chunk]), axis=1).data for i in range(0, len(X), chunk)]
        return np.concatenate(parts) if parts else np.zeros((0, self.class_count))


def train_baseline(config: BaselineConfig, source: DomainDataset, target: DomainDataset) -> tuple[BaselineClassifier, dict]:
    """Train one baseline on prepared domains and evaluate on both test sets.

    The target training portion is only touched (without labels) by the
    ``mmd_only`` variant.
    """
    if source.shape != target.shape:
        raise DataError(f"source shape {source.shape} differs from target shape {target.shape}")
    src, tgt = source.train(), target.train()
    if len(src) == 0:
        raise DataError("empty source training set")
    model = BaselineClassifier(source.shape, source.class_count, config.d_f, config.seed)
    params = model.named_parameters()
    opt = OptimizerState(method=config.optimizer, learning_rate=config.learning_rate)
    mmd_cfg = config.mmd or MmdConfig()
    use_mmd = config.variant == "mmd_only"
    src_cycle = BatchCycler(len(src), config.batch_size, np.random.default_rng([config.seed, 21]))
    tgt_cycle = BatchCycler(len(tgt), config.batch_size, np.random.default_rng([config.seed, 22])) if use_mmd else None
    n_steps = math.ceil(max(len(src), len(tgt)) / config.batch_size)
    history = []
    for epoch in range(1, config.epochs + 1):
        totals = []
        for _ in range(n_steps):
            s_idx = src_cycle.next()
            for p in params.values():
                p.grad = None
            if use_mmd:
                t_idx = tgt_cycle.next()
                feats = model.extractor(np.concatenate([src.X[s_idx], tgt.X[t_idx]]))
                f_s, f_t = feats[: len(s_idx)], feats[len(s_idx) :]
                ce = cross_entropy_from_log_probs(log_softmax(model.head(f_s), axis=1), src.labels[s_idx])
                loss = ce + mmd_loss(f_s, f_t, mmd_cfg) * config.lambda_mmd
            else:
                ce = cross_entropy_from_log_probs(log_softmax(model.logits(src.X[s_idx]), axis=1), src.labels[s_idx])
                loss = ce
            if not np.isfinite(loss.item()):
                raise NumericalAbort(f"{config.variant}: non-finite loss at epoch {epoch}")
            loss.backward()
            try:
                optimizer_step(opt, params)
            except NonFiniteGradientError as exc:
                raise NumericalAbort(f"{config.variant}: {exc}") from exc
            totals.append(loss.item())
        history.append({"epoch": epoch, "loss": float(np.mean(totals))})
    report = {"variant": config.variant, "history": history}
    for name, ds in (("source", source.test()), ("target", target.test())):
        if len(ds):
            pred = model.predict_proba(ds.X).argmax(axis=1)
            report[f"{name}_test"] = compute_metrics(pred, ds.labels, ds.class_count).as_dict()
    log.info("%s: target test acc %s", config.variant, report.get("target_test", {}).get("accuracy"))
    return model, report
