import os

import numpy as np
import pytest

from sparselab.checkpoint import (
    MAGIC,
    load_checkpoint,
    rebuild_model,
    save_checkpoint,
)
from sparselab.errors import CheckpointError
from sparselab.models import build_model, mlp_spec
from sparselab.rng import Rng
from sparselab.sparsify import SparsityDistribution, magnitude_mask


def sparse_model(seed=0):
    model = build_model(mlp_spec((12, 8, 4)), Rng(seed))
    masks = magnitude_mask(model.prunable_weights(), SparsityDistribution(kind="global", target=0.5))
    for n, m in masks.items():
        model.store.set_mask(n, m)
    return model


def test_round_trip_bit_exact(tmp_path):
    model = sparse_model()
    momentum = {n: Rng(9).normals(e.weights.size).reshape(e.weights.shape).astype(np.float32)
                for n, e in model.store.items()}
    meta = {"epoch": 3, "seed": 11, "method": "oneshot", "train_loss_eval": 1.2345678901234567}
    path = str(tmp_path / "a.splb")
    save_checkpoint(path, model.store, meta, momentum=momentum)
    ck = load_checkpoint(path)
    assert ck.meta["epoch"] == 3
    assert ck.meta["train_loss_eval"] == 1.2345678901234567
    for name, entry in model.store.items():
        assert ck.weights()[name].tobytes() == entry.weights.tobytes()
        assert ck.momentum()[name].tobytes() == momentum[name].tobytes()
    for name, mask in model.store.masks().items():
        assert ck.masks()[name].tobytes() == mask.tobytes()


def test_save_load_save_identical_bytes(tmp_path):
    model = sparse_model()
    p1, p2 = str(tmp_path / "a.splb"), str(tmp_path / "b.splb")
    save_checkpoint(p1, model.store, {"epoch": 1})
    ck = load_checkpoint(p1)
    store2 = model.store.clone()
    for name, arr in ck.weights().items():
        store2[name].weights[...] = arr
    save_checkpoint(p2, store2, {"epoch": 1})
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_magic_and_layout(tmp_path):
    path = str(tmp_path / "a.splb")
    model = sparse_model()
    save_checkpoint(path, model.store, {"epoch": 0})
    raw = open(path, "rb").read()
    assert raw[:4] == MAGIC == b"SPLB"
    version = int.from_bytes(raw[4:8], "little")
    assert version == 1
    header_len = int.from_bytes(raw[8:16], "little")
    header = raw[16 : 16 + header_len].decode("utf-8")
    assert '"tensors"' in header and '"meta"' in header


def test_bad_magic_rejected(tmp_path):
    path = str(tmp_path / "bad.splb")
    with open(path, "wb") as f:
        f.write(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_truncated_payload_rejected(tmp_path):
    path = str(tmp_path / "a.splb")
    model = sparse_model()
    save_checkpoint(path, model.store, {"epoch": 0})
    raw = open(path, "rb").read()
    with open(path, "wb") as f:
        f.write(raw[:-8])
    with pytest.raises(CheckpointError, match="bounds"):
        load_checkpoint(path)


def test_rebuild_model_restores_masks(tmp_path):
    model = sparse_model(seed=4)
    path = str(tmp_path / "a.splb")
    save_checkpoint(path, model.store, {"epoch": 0, "model_spec": model.spec.to_dict()})
    loaded = rebuild_model(load_checkpoint(path))
    assert loaded.spec == model.spec
    for name, entry in model.store.items():
        assert np.array_equal(loaded.store[name].weights, entry.weights)
        lm, em = loaded.store[name].mask, entry.mask
        assert (lm is None) == (em is None)
        if em is not None:
            assert np.array_equal(lm, em)


def test_atomic_write_leaves_no_temp(tmp_path):
    model = sparse_model()
    path = str(tmp_path / "a.splb")
    save_checkpoint(path, model.store, {"epoch": 0})
    assert os.listdir(tmp_path) == ["a.splb"]
