"""Sample matrices, domain datasets, synthetic domain-shift generation and I/O."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

SETS = ("R", "M", "test")


class DataError(ValueError):
    """Raised for malformed datasets, manifests and signal files."""


@dataclass(frozen=True)
class LabeledSample:
    matrix: np.ndarray
    label: int
    domain: str
    set: str
    id: int


@dataclass
class DomainDataset:
    """All samples of one domain, stored as stacked arrays.

    ``X`` has shape (N, H, W); ``sets`` holds one of ``R``, ``M`` or ``test``
    per sample (``M`` until a reference split has been made).
    """

    X: np.ndarray
    labels: np.ndarray
    domain: str
    class_count: int
    ids: np.ndarray | None = None
    sets: np.ndarray | None = None
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 3:
            raise DataError(f"expected (N, H, W) samples, got shape {self.X.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = len(self.X)
        if len(self.labels) != n:
            raise DataError("label count does not match sample count")
        if self.domain not in ("source", "target"):
            raise DataError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")
        self.ids = np.arange(n, dtype=np.int64) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if len(np.unique(self.ids)) != n:
            raise DataError("sample ids must be unique")
        self.sets = np.full(n, "M", dtype=object) if self.sets is None else np.asarray(self.sets, dtype=object)
        bad = set(self.sets) - set(SETS)
        if bad:
            raise DataError(f"unknown set tags {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.X.shape[1:])

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    @property
    def normalized(self) -> bool:
        return self.norm_mean is not None

    def samples(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            yield LabeledSample(self.X[i], int(self.labels[i]), self.domain, str(self.sets[i]), int(self.ids[i]))

    def subset(self, mask_or_index) -> "DomainDataset":
        idx = np.asarray(mask_or_index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return replace(self, X=self.X[idx], labels=self.labels[idx], ids=self.ids[idx], sets=self.sets[idx])

    def with_sets(self, sets) -> "DomainDataset":
        return replace(self, sets=np.asarray(sets, dtype=object))

    @property
    def train_mask(self) -> np.ndarray:
        return self.sets != "test"

    def train(self) -> "DomainDataset":
        return self.subset(self.train_mask)

    def test(self) -> "DomainDataset":
        return self.subset(self.sets == "test")


# --------------------------------------------------------------------- windowing
def window_signal(signal, window: int = 1024, side: int = 32) -> list[np.ndarray]:
    """Cut a 1-D signal into non-overlapping ``side x side`` matrices (row-major).

    The trailing remainder shorter than one window is dropped.
    """
    if window != side * side:
        raise DataError(f"window {window} must equal side^2 = {side * side}")
    x = np.asarray(signal, dtype=np.float64).reshape(-1)
    count = len(x) // window
    return [x[k * window : (k + 1) * window].reshape(side, side) for k in range(count)]


# ------------------------------------------------------------------ normalizing
def normalize(dataset: DomainDataset) -> DomainDataset:
    """Per-feature z-score using statistics of the dataset's training portion.

    The statistics are stored on the result so they can be re-applied to
    held-out data with :func:`apply_normalization`.
    """
    if len(dataset) == 0:
        raise DataError("cannot normalize an empty dataset")
    train = dataset.X[dataset.train_mask]
    if len(train) == 0:
        raise DataError("dataset has no training samples to take statistics from")
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    degenerate = std < 1e-8
    if degenerate.any():
        log.warning("%d zero-variance feature(s); variance clamped to 1e-8", int(degenerate.sum()))
        std = np.where(degenerate, 1e-8, std)
    return apply_normalization(dataset, mean, std)


def apply_normalization(dataset: DomainDataset, mean: np.ndarray, std: np.ndarray) -> DomainDataset:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != dataset.shape or std.shape != dataset.shape:
        raise DataError(f"normalization statistics shape {mean.shape} does not match samples {dataset.shape}")
    X = (dataset.X - mean) / std
    # exactly constant columns map to zero, whatever the clamp
    X = np.where(std <= 1e-8, 0.0, X) if np.any(std <= 1e-8) else X
    return replace(dataset, X=X, norm_mean=mean, norm_std=std)


def denormalize(dataset: DomainDataset) -> np.ndarray:
    if not dataset.normalized:
        return dataset.X.copy()
    return dataset.X * dataset.norm_std + dataset.norm_mean


# ---------------------------------------------------------------------- splits
def split_train_test(dataset: DomainDataset, n_train: int | None = None, train_fraction: float | None = None, seed: int = 0) -> DomainDataset:
    """Tag a uniformly random subset as training (``M``) and the rest as ``test``."""
    n = len(dataset)
    if n_train is None:
        if train_fraction is None:
            raise ValueError("give n_train or train_fraction")
        n_train = int(round(train_fraction * n))
    if not 0 <= n_train <= n:
        raise DataError(f"cannot take {n_train} training samples from {n}")
    perm = np.random.default_rng(seed).permutation(n)
    sets = np.full(n, "test", dtype=object)
    sets[perm[:n_train]] = "M"
    return dataset.with_sets(sets)


def split_reference(dataset: DomainDataset, n_ref: int, seed: int = 0) -> tuple[DomainDataset, DomainDataset]:
    """Uniformly random disjoint R/M partition of the training portion."""
    train = dataset.train()
    if n_ref < 0 or n_ref > len(train):
        raise DataError(f"n_ref={n_ref} exceeds the {len(train)} available training samples")
    perm = np.random.default_rng(seed).permutation(len(train))
    ref_idx = np.sort(perm[:n_ref])
    rest_idx = np.sort(perm[n_ref:])
    R = train.subset(ref_idx).with_sets(np.full(len(ref_idx), "R", dtype=object))
    M = train.subset(rest_idx).with_sets(np.full(len(rest_idx), "M", dtype=object))
    return R, M


def tag_reference(dataset: DomainDataset, n_ref: int, seed: int = 0) -> DomainDataset:
    """Return ``dataset`` with its training samples re-tagged per :func:`split_reference`."""
    R, _ = split_reference(dataset, n_ref, seed)
    sets = dataset.sets.copy()
    train_ids = set(int(i) for i in dataset.ids[dataset.train_mask])
    ref_ids = set(int(i) for i in R.ids)
    for k, sid in enumerate(dataset.ids):
        if int(sid) in train_ids:
            sets[k] = "R" if int(sid) in ref_ids else "M"
    return dataset.with_sets(sets)


# ------------------------------------------------------------------- synthetic
@dataclass
class ShiftDescriptor:
    rotation_deg: float = 0.0
    scale: float = 1.0
    offset: float = 0.0
    noise_std: float = 0.0  # extra noise added to target samples only

    def is_identity(self) -> bool:
        return self.rotation_deg == 0 and self.scale == 1 and self.offset == 0 and self.noise_std == 0


@dataclass
class SynthConfig:
    """Two-domain synthetic task.

    Prototypes default to points on a circle in a plane of feature space: class
    ``c`` sits at angle ``c * angle_step_deg``, so a rotation of the plane by
    more than half the step moves every class toward its neighbour.
    """

    class_count: int = 4
    shape: tuple = (16, 16)
    samples_per_class: int = 200
    noise_std: float = 0.1
    shift: ShiftDescriptor = field(default_factory=ShiftDescriptor)
    emerging_class: bool = False
    angle_step_deg: float = 40.0
    radius: float = 1.0
    prototypes: list | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.shift, dict):
            self.shift = ShiftDescriptor(**self.shift)
        self.shape = tuple(int(s) for s in self.shape)
        if self.class_count < 2:
            raise DataError("class_count must be at least 2")
        if self.noise_std < 0 or self.shift.noise_std < 0:
            raise DataError("noise std must be non-negative")
        if self.samples_per_class < 1:
            raise DataError("samples_per_class must be at least 1")
        if self.prototypes is not None:
            protos = np.asarray(self.prototypes, dtype=np.float64)
            if protos.shape != (self.class_count, self.shape[0] * self.shape[1]):
                raise DataError("prototypes must be class_count x (H*W)")


def _plane_basis(n_features: int, radius: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    # a, b span a plane in which pairwise Givens rotations act as rotations
    n_pairs = n_features // 2
    phase = rng.uniform(0.0, 2.0 * np.pi, n_pairs)
    a = np.zeros(n_features)
    b = np.zeros(n_features)
    a[0 : 2 * n_pairs : 2] = np.cos(phase)
    a[1 : 2 * n_pairs : 2] = np.sin(phase)
    b[0 : 2 * n_pairs : 2] = -np.sin(phase)
    b[1 : 2 * n_pairs : 2] = np.cos(phase)
    return radius * a, radius * b


def default_prototypes(config: SynthConfig) -> np.ndarray:
    n_features = config.shape[0] * config.shape[1]
    rng = np.random.default_rng([config.seed, 1])
    a, b = _plane_basis(n_features, config.radius, rng)
    angles = np.deg2rad(config.angle_step_deg) * np.arange(config.class_count)
    return np.cos(angles)[:, None] * a + np.sin(angles)[:, None] * b


def apply_shift(vectors: np.ndarray, shift: ShiftDescriptor) -> np.ndarray:
    """Rotate each coordinate pair (2k, 2k+1) by the shift angle, then scale and offset."""
    out = np.array(vectors, dtype=np.float64, copy=True)
    theta = np.deg2rad(shift.rotation_deg)
    if theta != 0.0:
        n_pairs = out.shape[-1] // 2
        x = out[..., 0 : 2 * n_pairs : 2].copy()
        y = out[..., 1 : 2 * n_pairs : 2].copy()
        out[..., 0 : 2 * n_pairs : 2] = math.cos(theta) * x - math.sin(theta) * y
        out[..., 1 : 2 * n_pairs : 2] = math.sin(theta) * x + math.cos(theta) * y
    return shift.scale * out + shift.offset


def synth_generate(config: SynthConfig) -> tuple[DomainDataset, DomainDataset]:
    """Generate (source, target) datasets.

    Source sample = prototype + N(0, noise^2). The target sample with the same
    index reuses that noise draw and is then passed through the shift. With
    ``emerging_class`` set, class 0 is generated for the target domain only.
    """
    H, W = config.shape
    protos = np.asarray(config.prototypes, dtype=np.float64) if config.prototypes is not None else default_prototypes(config)
    rng = np.random.default_rng([config.seed, 2])
    n = config.samples_per_class
    base, labels = [], []
    for c in range(config.class_count):
        base.append(protos[c] + config.noise_std * rng.standard_normal((n, H * W)))
        labels.append(np.full(n, c))
    base = np.concatenate(base)
    labels = np.concatenate(labels)
    target = apply_shift(base, config.shift)
    if config.shift.noise_std > 0:
        target = target + config.shift.noise_std * rng.standard_normal(target.shape)

    src_keep = labels != 0 if config.emerging_class else np.ones(len(labels), dtype=bool)
    source = DomainDataset(base[src_keep].reshape(-1, H, W), labels[src_keep], "source", config.class_count)
    target_ds = DomainDataset(target.reshape(-1, H, W), labels, "target", config.class_count)
    return source, target_ds


def prototype_matrix(config: SynthConfig, cls: int, domain: str = "target") -> np.ndarray:
    """Noise-free rendering of class ``cls`` in the given domain (unnormalized)."""
    protos = np.asarray(config.prototypes, dtype=np.float64) if config.prototypes is not None else default_prototypes(config)
    v = protos[cls]
    if domain == "target":
        v = apply_shift(v, config.shift)
    return v.reshape(config.shape)


# ----------------------------------------------------------------- ingestion
def read_signal(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"signal file not found: {path}")
    values = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                values.append(float(line))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: not a number: {line!r}") from exc
    return np.asarray(values, dtype=np.float64)


def load_manifest(path) -> dict[str, DomainDataset]:
    """Window every signal listed in a manifest; one dataset per condition.

    Manifest: ``{"signals": [{"path", "condition", "class"}], "window", "side"}``;
    relative signal paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    signals = manifest.get("signals") or []
    if not signals:
        raise DataError("manifest lists no signals")
    window = int(manifest.get("window", 1024))
    side = int(manifest.get("side", 32))
    if window != side * side:
        raise DataError(f"window {window} must equal side^2 = {side * side}")
    class_count = max(int(s["class"]) for s in signals) + 1
    per_cond: dict[str, tuple[list, list]] = {}
    for entry in signals:
        sig_path = Path(entry["path"])
        if not sig_path.is_absolute():
            sig_path = path.parent / sig_path
        mats = window_signal(read_signal(sig_path), window, side)
        xs, ys = per_cond.setdefault(str(entry["condition"]), ([], []))
        xs.extend(mats)
        ys.extend([int(entry["class"])] * len(mats))
    out = {}
    for cond, (xs, ys) in per_cond.items():
        X = np.stack(xs) if xs else np.zeros((0, side, side))
        out[cond] = DomainDataset(X, np.asarray(ys, dtype=np.int64), "source", class_count)
    return out


# -------------------------------------------------------------- serialization
def save_dataset(dataset: DomainDataset, directory, extra_meta: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "samples.bin", "wb") as fh:
        fh.write(np.ascontiguousarray(dataset.X, dtype="<f8").tobytes())
    meta = {
        "shape": list(dataset.shape),
        "labels": [int(v) for v in dataset.labels],
        "domain": dataset.domain,
        "class_count": int(dataset.class_count),
        "classes": dataset.classes,
        "ids": [int(v) for v in dataset.ids],
        "sets": [str(s) for s in dataset.sets],
        "normalization": None
        if not dataset.normalized
        else {"mean": dataset.norm_mean.ravel().tolist(), "std": dataset.norm_std.ravel().tolist()},
    }
    if extra_meta:
        meta.update(extra_meta)
    with open(directory / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    return directory


def load_dataset(directory) -> DomainDataset:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
        raw = np.frombuffer((directory / "samples.bin").read_bytes(), dtype="<f8")
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset at {directory}: {exc}") from exc
    H, W = meta["shape"]
    labels = np.asarray(meta["labels"], dtype=np.int64)
    if raw.size != len(labels) * H * W:
        raise DataError(f"samples.bin holds {raw.size} values, expected {len(labels) * H * W}")
    ds = DomainDataset(
        raw.reshape(len(labels), H, W).astype(np.float64),
        labels,
        meta["domain"],
        int(meta["class_count"]),
        ids=meta.get("ids"),
        sets=meta.get("sets"),
    )
    norm = meta.get("normalization")
    if norm:
        ds.norm_mean = np.asarray(norm["mean"], dtype=np.float64).reshape(H, W)
        ds.norm_std = np.asarray(norm["std"], dtype=np.float64).reshape(H, W)
    return ds
