"""Sparse-transfer recipes over a pretrained sparse model.

The gradual recipe trains the fresh classifier head (plus every bias and
normalization parameter) first, then unfreezes pruned linear weights block
by block from the back, one epoch per stage with the learning rate rewound
to its peak each time, and finishes with one all-layers epoch. Masks are
fixed for the entire transfer: sparsified weights keep their zeros bit for
bit. Baselines: the plain dense recipe (3 epochs, everything trainable),
its rescaled-length variants, and head-only linear finetuning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigError, MaskMutationError
from .models import Model, reinit_head
from .optim import LrSchedule, SgdState, lr_at, sgd_step
from .rng import Rng, STREAM_HEAD_INIT, STREAM_SHUFFLE, STREAM_DROPOUT
from .runner import predict_logits
from . import diagnostics

EMBEDDINGS = "embeddings"
HEAD = "head"

_ALWAYS_TRAINABLE = ("head-param", "bias", "norm-param")
_BLOCK_WEIGHTS = ("linear-weight", "conv-weight")


@dataclass
class LayerGroups:
    order: list[str]  # embeddings, block_1 ... block_B, head
    members: dict[str, list[str]]
    classes: dict[str, str]

    @property
    def n_blocks(self) -> int:
        return sum(1 for g in self.order if g.startswith("block_"))


def layer_groups(model: Model) -> LayerGroups:
    members: dict[str, list[str]] = {}
    classes: dict[str, str] = {}
    for name in model.store.names():
        info = model.info[name]
        members.setdefault(info.group, []).append(name)
        classes[name] = info.cls
    blocks = sorted(
        (g for g in members if g.startswith("block_")), key=lambda g: int(g.split("_")[1])
    )
    order = [EMBEDDINGS] + blocks + [HEAD]
    for g in order:
        members.setdefault(g, [])
    return LayerGroups(order=order, members=members, classes=classes)


def trainable_set(groups: LayerGroups, stage: int) -> set[str]:
    """Stage 0: head + all biases and norm params. Stage k adds the pruned
    weights of the k rearmost blocks; the final stage unfreezes everything,
    embeddings included."""
    B = groups.n_blocks
    if not 0 <= stage <= B + 1:
        raise ConfigError(f"stage {stage} outside [0, {B + 1}]")
    names = set()
    for group, members in groups.members.items():
        for name in members:
            if groups.classes[name] in _ALWAYS_TRAINABLE:
                names.add(name)
    if stage == B + 1:
        return {n for ms in groups.members.values() for n in ms}
    block_order = [g for g in groups.order if g.startswith("block_")]
    for group in block_order[B - stage :]:
        for name in groups.members[group]:
            if groups.classes[name] in _BLOCK_WEIGHTS:
                names.add(name)
    return names


@dataclass
class TransferHyper:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs_per_stage: int = 1
    label_smoothing: float = 0.0
    early_stop: bool = True
    patience: int = 2


@dataclass
class StageRecord:
    stage: int
    label: str
    trainable: int
    lr_first: float
    lr_last: float
    eval_loss: float
    top1: float


@dataclass
class TransferResult:
    history: list[StageRecord]
    best_top1: float
    best_stage: int
    stopped_early: bool
    masks_preserved: bool


def _snapshot_masks(model: Model) -> dict[str, np.ndarray]:
    return {n: m.copy() for n, m in model.store.masks().items()}


def _masks_identical(model: Model, snapshot: dict[str, np.ndarray]) -> bool:
    current = model.store.masks()
    if set(current) != set(snapshot):
        return False
    return all(np.array_equal(current[n], snapshot[n]) for n in snapshot)


def _train_span(
    model: Model,
    data: Dataset,
    hyper: TransferHyper,
    epochs: int,
    shuffle_rng: Rng,
    dropout_rng: Rng,
) -> tuple[float, float]:
    """Train for `epochs` with a fresh linear-decay schedule (no warmup).

    Returns the learning rate at the first and last executed step.
    """
    n = len(data.x_train)
    spe = max(1, math.ceil(n / hyper.batch_size))
    total_steps = epochs * spe
    schedule = LrSchedule(
        kind="linear-warmup-linear-decay", peak=hyper.lr, warmup_end=0, total_steps=total_steps
    )
    sgd = SgdState(
        model.store, schedule, momentum=hyper.momentum, weight_decay=hyper.weight_decay
    )
    step = 0
    for _ in range(epochs):
        order = shuffle_rng.permutation(n)
        for b in range(spe):
            idx = order[b * hyper.batch_size : (b + 1) * hyper.batch_size]
            if idx.size == 0:
                continue
            _, grads = model.loss_and_grad(
                data.x_train[idx],
                data.y_train[idx],
                eps=hyper.label_smoothing,
                train=True,
                dropout_rng=dropout_rng,
            )
            sgd_step(model.store, grads, sgd, step)
            step += 1
    return lr_at(schedule, 0), lr_at(schedule, max(0, total_steps - 1))


def _set_trainable(model: Model, names: set[str]) -> None:
    for name, entry in model.store.items():
        entry.trainable = name in names


def _eval(model: Model, data: Dataset) -> tuple[float, float]:
    logits = predict_logits(model, data.x_val)
    return diagnostics.mean_cross_entropy(logits, data.y_val), diagnostics.top1(
        logits, data.y_val
    )


def transfer_run(
    model: Model,
    data: Dataset,
    hyper: TransferHyper,
    rng: Rng,
    fresh_head: bool = True,
) -> TransferResult:
    """Gradual back-to-front unfreezing with per-stage LR rewind."""
    if fresh_head:
        reinit_head(model, rng.stream(STREAM_HEAD_INIT))
    groups = layer_groups(model)
    B = groups.n_blocks
    mask_snapshot = _snapshot_masks(model)
    shuffle_rng = rng.stream(STREAM_SHUFFLE)
    dropout_rng = rng.stream(STREAM_DROPOUT)

    history: list[StageRecord] = []
    best_top1 = -1.0
    best_stage = -1
    since_improve = 0
    stopped = False
    for stage in range(B + 2):
        names = trainable_set(groups, stage)
        _set_trainable(model, names)
        lr_first, lr_last = _train_span(
            model, data, hyper, hyper.epochs_per_stage, shuffle_rng, dropout_rng
        )
        if not _masks_identical(model, mask_snapshot):
            raise MaskMutationError(f"mask changed during transfer stage {stage}")
        loss, top1 = _eval(model, data)
        label = "all-layers" if stage == B + 1 else ("head-only" if stage == 0 else f"unfreeze-{stage}")
        history.append(
            StageRecord(
                stage=stage,
                label=label,
                trainable=len(names),
                lr_first=lr_first,
                lr_last=lr_last,
                eval_loss=loss,
                top1=top1,
            )
        )
        if top1 > best_top1:
            best_top1, best_stage, since_improve = top1, stage, 0
        else:
            since_improve += 1
            if hyper.early_stop and since_improve >= hyper.patience:
                stopped = True
                break
    _set_trainable(model, set(model.store.names()))
    return TransferResult(
        history=history,
        best_top1=best_top1,
        best_stage=best_stage,
        stopped_early=stopped,
        masks_preserved=_masks_identical(model, mask_snapshot),
    )


DENSE_RECIPE_EPOCHS = 3


def baseline_recipes(
    model: Model,
    data: Dataset,
    hyper: TransferHyper,
    rng: Rng,
    mode: str = "dense-recipe",
    epochs: int | None = None,
    finetune: str = "full",
    fresh_head: bool = True,
) -> TransferResult:
    """Dense-recipe baseline (3 epochs, full finetune), rescaled(E) variants,
    and linear (head-only) finetuning."""
    if mode == "dense-recipe":
        epochs = DENSE_RECIPE_EPOCHS
    elif mode == "rescaled":
        if not epochs or epochs < 1:
            raise ConfigError("rescaled mode needs an explicit epoch count")
    else:
        raise ConfigError(f"unknown baseline mode {mode!r}")
    if finetune not in ("full", "linear"):
        raise ConfigError(f"unknown finetune variant {finetune!r}")

    if fresh_head:
        reinit_head(model, rng.stream(STREAM_HEAD_INIT))
    groups = layer_groups(model)
    mask_snapshot = _snapshot_masks(model)
    if finetune == "linear":
        names = {n for n, c in groups.classes.items() if c == "head-param"}
    else:
        names = set(model.store.names())
    _set_trainable(model, names)

    shuffle_rng = rng.stream(STREAM_SHUFFLE)
    dropout_rng = rng.stream(STREAM_DROPOUT)
    history: list[StageRecord] = []
    best_top1 = -1.0
    best_stage = -1
    since_improve = 0
    stopped = False
    n = len(data.x_train)
    spe = max(1, math.ceil(n / hyper.batch_size))
    total_steps = epochs * spe
    schedule = LrSchedule(
        kind="linear-warmup-linear-decay", peak=hyper.lr, warmup_end=0, total_steps=total_steps
    )
    sgd = SgdState(model.store, schedule, momentum=hyper.momentum, weight_decay=hyper.weight_decay)
    step = 0
    for epoch in range(epochs):
        order = shuffle_rng.permutation(n)
        lr_first = lr_at(schedule, step)
        for b in range(spe):
            idx = order[b * hyper.batch_size : (b + 1) * hyper.batch_size]
            if idx.size == 0:
                continue
            _, grads = model.loss_and_grad(
                data.x_train[idx],
                data.y_train[idx],
                eps=hyper.label_smoothing,
                train=True,
                dropout_rng=dropout_rng,
            )
            sgd_step(model.store, grads, sgd, step)
            step += 1
        if not _masks_identical(model, mask_snapshot):
            raise MaskMutationError(f"mask changed during baseline epoch {epoch}")
        loss, top1 = _eval(model, data)
        history.append(
            StageRecord(
                stage=epoch,
                label=f"{mode}-{finetune}",
                trainable=len(names),
                lr_first=lr_first,
                lr_last=lr_at(schedule, max(0, step - 1)),
                eval_loss=loss,
                top1=top1,
            )
        )
        if top1 > best_top1:
            best_top1, best_stage, since_improve = top1, epoch, 0
        else:
            since_improve += 1
            if hyper.early_stop and since_improve >= hyper.patience:
                stopped = True
                break
    _set_trainable(model, set(model.store.names()))
    return TransferResult(
        history=history,
        best_top1=best_top1,
        best_stage=best_stage,
        stopped_early=stopped,
        masks_preserved=_masks_identical(model, mask_snapshot),
    )
