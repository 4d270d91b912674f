"""Model-level (global latent statistics) and sample-level (Monte-Carlo) uncertainty."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DataError, DomainDataset
from .embedding import embed
from .model import GTNPModel
from .numerics import Tensor, kde_estimate, log_softmax, no_grad, silverman_bandwidth

KDE_POINTS = 200
GLOBAL_KDE_DRAWS = 2000
# stream id for the global-latent KDE draws, kept apart from the per-sample streams [seed, k]
GLOBAL_KDE_STREAM = 2**31 - 1


@dataclass
class GlobalRecord:
    epoch: int
    mean: float  # dimension average of the variational mean
    variance: float  # dimension average of exp(logvar)

    def as_dict(self) -> dict:
        return {"epoch": self.epoch, "mean": self.mean, "variance": self.variance}


@dataclass
class GlobalTrace:
    records: list[GlobalRecord] = field(default_factory=list)

    def add(self, record: GlobalRecord) -> None:
        self.records.append(record)

    @property
    def final(self) -> tuple[float, float]:
        if not self.records:
            raise ValueError("empty global trace")
        r = self.records[-1]
        return r.mean, r.variance

    def as_list(self) -> list[dict]:
        return [r.as_dict() for r in self.records]

    @classmethod
    def from_epochs(cls, epoch_records: list[dict]) -> "GlobalTrace":
        """Rebuild from the per-epoch records of a training trace."""
        return cls([GlobalRecord(int(e["epoch"]), e["global_latent"]["mean_avg"], e["global_latent"]["var_avg"]) for e in epoch_records])


def track_global(model: GTNPModel, epoch: int) -> GlobalRecord:
    g = model.global_latent
    return GlobalRecord(int(epoch), float(g.mean.data.mean()), float(np.exp(g.logvar.data).mean()))


@dataclass
class LocalUncertainty:
    sample_id: int | None
    n_draws: int
    scores: np.ndarray  # softmax of per-class mean log-probability
    variances: np.ndarray  # per-class variance of the draw probabilities
    pred: int
    draws: np.ndarray  # (n_draws, class_count) probabilities

    def as_dict(self, label=None) -> dict:
        return {
            "id": None if self.sample_id is None else int(self.sample_id),
            "label": None if label is None else int(label),
            "pred": self.pred,
            "scores": self.scores.tolist(),
            "variances": self.variances.tolist(),
        }


def local_uncertainty(model: GTNPModel, x, n_draws: int = 100, seed=0, logvar_override: float | None = None, sample_id=None) -> LocalUncertainty:
    """Resample u ~ p(u|h) ``n_draws`` times for one input and aggregate class log-probabilities.

    z_global sits at its variational mean and z = mean of q(z|u), so every bit
    of randomness comes from u. Draws are taken in order from one stream seeded
    by ``seed``; a longer run with the same seed reuses the noise of a shorter one.
    ``logvar_override`` replaces the log-variance of p(u|h) (e.g. -50 to
    collapse sampling).
    """
    if n_draws < 1:
        raise ValueError("n_draws must be at least 1")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and len(x) == 1:
        x = x[0]
    if x.shape != model.input_shape:
        raise DataError(f"input shape {x.shape} does not match model input {model.input_shape}")
    rng = np.random.default_rng(seed)
    with no_grad():
        pu = model.embed_head(embed(model.extractor, x[None], model.global_latent.mean))
        mean = pu.mean.data[0]
        logvar = pu.logvar.data[0] if logvar_override is None else np.full_like(mean, float(logvar_override))
        eps = rng.standard_normal((n_draws, len(mean)))
        u = Tensor(mean[None, :] + np.exp(0.5 * logvar)[None, :] * eps)
        z = model.est_head(u).mean
        logits = model.classifier.logits(z, u)
        logp = log_softmax(logits, axis=1).data
    probs = np.exp(logp)
    probs /= probs.sum(axis=1, keepdims=True)
    mean_logp = logp.mean(axis=0)
    scores = np.exp(mean_logp - mean_logp.max())
    scores /= scores.sum()
    return LocalUncertainty(
        sample_id=sample_id,
        n_draws=n_draws,
        scores=scores,
        variances=probs.var(axis=0),
        pred=int(np.argmax(scores)),
        draws=probs,
    )


def _kde_block(values) -> dict:
    values = np.asarray(values, dtype=np.float64).ravel()
    bw = silverman_bandwidth(values)
    grid = np.linspace(values.min() - 3 * bw, values.max() + 3 * bw, KDE_POINTS)
    return {"grid": grid.tolist(), "density": kde_estimate(values, grid, bw).tolist(), "bandwidth": bw}


def global_latent_kde(model: GTNPModel, seed=0) -> dict:
    """Density of draws from q(z_global), pooled over dimensions."""
    g = model.global_latent
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((GLOBAL_KDE_DRAWS, g.dim))
    draws = g.mean.data[None, :] + np.exp(0.5 * g.logvar.data)[None, :] * eps
    return _kde_block(draws)


def uncertainty_report(
    model: GTNPModel,
    test_set: DomainDataset,
    n_draws: int = 100,
    seed: int = 0,
    select=(),
    global_trace: GlobalTrace | None = None,
) -> tuple[dict, dict[int, np.ndarray]]:
    """Global trace, one local-uncertainty row per test sample and KDE curves.

    ``select`` lists sample ids whose per-class probability densities (and the
    global-latent density) are added as KDE blocks; with an empty selection
    there are no KDE blocks. Sample ``k`` of the test set uses the stream
    ``[seed, k]``. Returns the report and the draw matrices of the selected
    samples keyed by id.
    """
    if len(test_set) == 0:
        raise DataError("uncertainty report needs a non-empty test set")
    select = [int(s) for s in select]
    unknown = sorted(set(select) - set(int(i) for i in test_set.ids))
    if unknown:
        raise DataError(f"selected ids {unknown} are not in the test set")
    trace = global_trace if global_trace is not None else GlobalTrace([track_global(model, 0)])
    rows, draws = [], {}
    for k in range(len(test_set)):
        sid = int(test_set.ids[k])
        lu = local_uncertainty(model, test_set.X[k], n_draws, seed=[seed, k], sample_id=sid)
        rows.append(lu.as_dict(test_set.labels[k]))
        if sid in select:
            draws[sid] = lu.draws
    report = {"global_trace": trace.as_list(), "samples": rows, "kde": {}}
    if select:
        report["kde"]["global_latent"] = global_latent_kde(model, seed=[seed, GLOBAL_KDE_STREAM])
        report["kde"]["samples"] = {
            str(sid): {str(c): _kde_block(draws[sid][:, c]) for c in range(model.class_count)} for sid in select
        }
    return report, draws


def write_report(directory, report: dict, draws: dict[int, np.ndarray], header: dict | None = None) -> Path:
    """uncertainty.json plus one draws_<id>.csv per selected sample."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "uncertainty.json"
    path.write_text(json.dumps({**(header or {}), **report}, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    for sid, mat in draws.items():
        with open(directory / f"draws_{sid}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"class_{c}" for c in range(mat.shape[1])])
            for row in mat:
                w.writerow([repr(float(v)) for v in row])
    return path
