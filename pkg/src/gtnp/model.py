"""GTNP parameter groups and the binary checkpoint format.

Checkpoint layout: 8-byte little-endian header length, a UTF-8 JSON header
listing every array's name, shape and byte offset (relative to the start of
the data block), then the arrays as little-endian float64, row-major.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .embedding import EmbeddingHead, FeatureExtractor, GlobalLatent
from .graph import Bandwidth, GcnParams
from .latent import ClassifierHead, EstDistHead, RealDistHead
from .layers import Module
from .numerics import Tensor

CHECKPOINT_FORMAT = "gtnp-checkpoint-1"


@dataclass
class Dimensions:
    d_f: int = 48
    d_g: int = 16
    d_u: int = 64
    d_z: int = 64


class GTNPModel(Module):
    def __init__(self, input_shape, class_count: int, dims: Dimensions | None = None, seed: int = 0):
        dims = dims or Dimensions()
        rng = np.random.default_rng([seed, 11])
        self.input_shape = tuple(int(s) for s in input_shape)
        self.class_count = int(class_count)
        self.dims = dims
        self.extractor = FeatureExtractor(self.input_shape, rng, dims.d_f)
        self.global_latent = GlobalLatent(dims.d_g)
        self.embed_head = EmbeddingHead(dims.d_f + dims.d_g, rng, dims.d_u)
        self.gcn = GcnParams(dims.d_f, class_count, rng)
        self.bandwidth = Bandwidth(1.0)
        self.real_head = RealDistHead(dims.d_u, class_count, rng, dims.d_z)
        self.est_head = EstDistHead(dims.d_u, rng, dims.d_z)
        self.classifier = ClassifierHead(dims.d_z, dims.d_u, class_count, rng)

    def trainable_parameters(self) -> dict[str, Tensor]:
        """Everything the main objective optimizes (the GCN is pretrained separately)."""
        return {k: v for k, v in self.named_parameters().items() if not k.startswith("gcn.")}

    def meta(self) -> dict:
        return {"input_shape": list(self.input_shape), "class_count": self.class_count, "dims": asdict(self.dims)}

    @classmethod
    def from_meta(cls, meta: dict) -> "GTNPModel":
        return cls(meta["input_shape"], meta["class_count"], Dimensions(**meta["dims"]))


def write_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"format": CHECKPOINT_FORMAT, "arrays": entries, "meta": meta}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def read_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path} is not a checkpoint")
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    base = 8 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        buf = raw[start : start + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(e["shape"])
    return arrays, header["meta"]


def save_model(path, model: GTNPModel, extra_arrays: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> Path:
    arrays = {f"param.{k}": v.data for k, v in model.named_parameters().items()}
    for k, v in (extra_arrays or {}).items():
        arrays[f"extra.{k}"] = v
    full_meta = {"model": model.meta(), **(meta or {})}
    return write_arrays(path, arrays, full_meta)


def load_model(path) -> tuple[GTNPModel, dict[str, np.ndarray], dict]:
    arrays, meta = read_arrays(path)
    model = GTNPModel.from_meta(meta["model"])
    params = model.named_parameters()
    for name, p in params.items():
        key = f"param.{name}"
        if key not in arrays:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        if arrays[key].shape != p.data.shape:
            raise ValueError(f"parameter {name!r} has shape {arrays[key].shape}, expected {p.data.shape}")
        p.data = arrays[key].copy()
    extras = {k[len("extra.") :]: v for k, v in arrays.items() if k.startswith("extra.")}
    return model, extras, meta
