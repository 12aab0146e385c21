"""Versioned binary checkpoints.

Layout: magic "SPLB" | u32 LE format version | u64 LE header length |
UTF-8 JSON header | raw little-endian f32 payload. The header carries one
record per tensor (name, shape, kind, byte offset into the payload) plus
free-form metadata; masks are stored as f32 0/1 and momentum buffers ride
along so that load(save(x)) is bit-identical to x.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError
from .models import Model, ModelSpec, ParamStore, build_model
from .rng import Rng

MAGIC = b"SPLB"
VERSION = 1

KIND_WEIGHTS = "weights"
KIND_MASK = "mask"
KIND_MOMENTUM = "momentum"


@dataclass
class Checkpoint:
    tensors: dict[tuple[str, str], np.ndarray]  # (kind, name) -> f32 array
    meta: dict

    def weights(self) -> dict[str, np.ndarray]:
        return {n: t for (k, n), t in self.tensors.items() if k == KIND_WEIGHTS}

    def masks(self) -> dict[str, np.ndarray]:
        return {n: t for (k, n), t in self.tensors.items() if k == KIND_MASK}

    def momentum(self) -> dict[str, np.ndarray]:
        return {n: t for (k, n), t in self.tensors.items() if k == KIND_MOMENTUM}


def save_checkpoint(
    path: str,
    store: ParamStore,
    meta: dict,
    momentum: dict[str, np.ndarray] | None = None,
) -> None:
    records = []
    blobs = []
    offset = 0

    def push(kind, name, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr, dtype="<f4")
        records.append(
            {"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset}
        )
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)

    for name, entry in store.items():
        push(KIND_WEIGHTS, name, entry.weights)
        if entry.mask is not None:
            push(KIND_MASK, name, entry.mask)
    if momentum:
        for name, buf in momentum.items():
            push(KIND_MOMENTUM, name, buf)

    header = json.dumps(
        {"tensors": records, "meta": meta}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    header_end = 16 + header_len
    if header_end > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e
    payload = raw[header_end:]
    tensors: dict[tuple[str, str], np.ndarray] = {}
    for rec in header["tensors"]:
        shape = tuple(rec["shape"])
        n_bytes = int(np.prod(shape)) * 4 if shape else 4
        start = rec["offset"]
        if start + n_bytes > len(payload):
            raise CheckpointError(f"{path}: tensor {rec['name']} out of payload bounds")
        arr = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape)), offset=start)
        tensors[(rec["kind"], rec["name"])] = arr.reshape(shape).copy()
    return Checkpoint(tensors=tensors, meta=header["meta"])


def rebuild_model(ck: Checkpoint) -> Model:
    """Reconstruct a Model (weights + masks) from a checkpoint's metadata."""
    if "model_spec" not in ck.meta:
        raise CheckpointError("checkpoint metadata carries no model spec")
    spec = ModelSpec.from_dict(ck.meta["model_spec"])
    model = build_model(spec, Rng(0))
    weights = ck.weights()
    if set(weights) != set(model.store.names()):
        raise CheckpointError("checkpoint parameters do not match the model spec")
    for name, arr in weights.items():
        entry = model.store[name]
        if entry.weights.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}")
        entry.weights[...] = arr
    for name, mask in ck.masks().items():
        model.store.set_mask(name, mask)
    return model
