"""Masks, magnitude criteria, sparsity budgets, and the three schedulers.

Sparsity s is always the fraction of zeroed entries among the weights a
distribution actually scores; layers on the keep-dense list get all-ones
masks and stay out of every scoring pool.

Ties anywhere are broken stably by lower flat index (kept first when
keeping, dropped first when dropping), so masks are bit-reproducible.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import LayerCollapseError, ScheduleError

log = logging.getLogger(__name__)

UNIFORM = "uniform"
GLOBAL = "global"
ERK = "erk"
BLOCK4_GLOBAL = "block4-global"

BLOCK = 4

DENSE_WARMUP = "dense-warmup"
COMPRESSED = "compressed"
DECOMPRESSED = "decompressed"


@dataclass(frozen=True)
class SparsityDistribution:
    kind: str = GLOBAL
    target: float = 0.9
    keep_dense: tuple[str, ...] = ()

    def with_target(self, target: float) -> "SparsityDistribution":
        return replace(self, target=target)


def _floor_count(x: float) -> int:
    """floor over the intended real value: absorbs f64 representation noise
    in the sparsity target (e.g. (1-0.8)*100 evaluating to 19.999...96)."""
    return int(math.floor(x + 1e-9 + abs(x) * 1e-12))


def _top_keep_mask(scores: np.ndarray, kept: int) -> np.ndarray:
    """Boolean keep flags for the `kept` largest scores, low index wins ties."""
    order = np.lexsort((np.arange(scores.size), -scores))
    keep = np.zeros(scores.size, dtype=bool)
    keep[order[:kept]] = True
    return keep


def _layer_keep(weights: np.ndarray, kept: int) -> np.ndarray:
    flat = np.abs(weights.reshape(-1).astype(np.float64))
    return _top_keep_mask(flat, kept).reshape(weights.shape)


def _block_scores(weights: np.ndarray) -> np.ndarray:
    """L1 norm of contiguous groups of 4 in row-major order (last may be short)."""
    flat = np.abs(weights.reshape(-1).astype(np.float64))
    n_groups = (flat.size + BLOCK - 1) // BLOCK
    padded = np.zeros(n_groups * BLOCK)
    padded[: flat.size] = flat
    return padded.reshape(n_groups, BLOCK).sum(axis=1)


def _expand_block_keep(keep_groups: np.ndarray, shape: tuple) -> np.ndarray:
    n = int(np.prod(shape))
    flat = np.repeat(keep_groups, BLOCK)[:n]
    return flat.reshape(shape)


def erk_densities(layer_shapes: dict[str, tuple], s_global: float) -> dict[str, float]:
    """Per-layer densities proportional to (sum of dims)/(product of dims).

    A single scale factor matches the global budget; densities that would
    exceed 1 are clipped and the scale re-solved on the rest.
    """
    if not 0.0 <= s_global < 1.0:
        raise ScheduleError(f"global sparsity {s_global} outside [0, 1)")
    names = list(layer_shapes)
    raw = {n: sum(layer_shapes[n]) / float(np.prod(layer_shapes[n])) for n in names}
    numel = {n: int(np.prod(layer_shapes[n])) for n in names}
    budget = (1.0 - s_global) * sum(numel.values())
    clipped: set[str] = set()
    while True:
        remaining = budget - sum(numel[n] for n in clipped)
        free = [n for n in names if n not in clipped]
        if not free:
            if remaining > 1e-9:
                raise LayerCollapseError("ERK budget infeasible: all layers clipped")
            break
        denom = sum(raw[n] * numel[n] for n in free)
        scale = remaining / denom
        over = [n for n in free if scale * raw[n] >= 1.0]
        if not over:
            break
        clipped.update(over)
    densities = {n: (1.0 if n in clipped else scale * raw[n]) for n in names}
    for n, d in densities.items():
        if not 0.0 < d <= 1.0:
            raise LayerCollapseError(f"ERK density {d} for layer {n} outside (0, 1]")
    return densities


def _pool_kept_counts(
    weights: dict[str, np.ndarray], dist: SparsityDistribution
) -> dict[str, int] | int:
    """Kept count per layer pool, or one count for a global pool."""
    s = dist.target
    if dist.kind == GLOBAL:
        total = sum(w.size for w in weights.values())
        return _floor_count((1.0 - s) * total)
    if dist.kind == BLOCK4_GLOBAL:
        total_groups = sum((w.size + BLOCK - 1) // BLOCK for w in weights.values())
        return _floor_count((1.0 - s) * total_groups)
    if dist.kind == UNIFORM:
        counts = {n: _floor_count((1.0 - s) * w.size) for n, w in weights.items()}
    elif dist.kind == ERK:
        dens = erk_densities({n: w.shape for n, w in weights.items()}, s)
        counts = {n: _floor_count(dens[n] * w.size) for n, w in weights.items()}
    else:
        raise ScheduleError(f"unknown sparsity distribution {dist.kind!r}")
    for n, kept in counts.items():
        if kept == 0 and s < 1.0:
            raise LayerCollapseError(f"target {s} would zero out layer {n}")
    return counts


def magnitude_mask(
    weights: dict[str, np.ndarray], dist: SparsityDistribution
) -> dict[str, np.ndarray]:
    """f32 0/1 masks keeping the top (1-s) fraction by |w| per scoring pool."""
    if not 0.0 <= dist.target < 1.0:
        raise ScheduleError(f"sparsity target {dist.target} outside [0, 1)")
    masks: dict[str, np.ndarray] = {}
    pooled = {n: w for n, w in weights.items() if n not in dist.keep_dense}
    for n in weights:
        if n in dist.keep_dense:
            masks[n] = np.ones(weights[n].shape, dtype=np.float32)
    if not pooled:
        return masks

    kept = _pool_kept_counts(pooled, dist)
    if dist.kind in (UNIFORM, ERK):
        for n, w in pooled.items():
            masks[n] = _layer_keep(w, kept[n]).astype(np.float32)
    elif dist.kind == GLOBAL:
        names = list(pooled)
        scores = np.concatenate(
            [np.abs(pooled[n].reshape(-1).astype(np.float64)) for n in names]
        )
        keep = _top_keep_mask(scores, kept)
        ofs = 0
        for n in names:
            size = pooled[n].size
            masks[n] = keep[ofs : ofs + size].reshape(pooled[n].shape).astype(np.float32)
            ofs += size
    else:  # block4-global
        names = list(pooled)
        group_scores = [_block_scores(pooled[n]) for n in names]
        keep = _top_keep_mask(np.concatenate(group_scores), kept)
        ofs = 0
        for n, gs in zip(names, group_scores):
            masks[n] = _expand_block_keep(keep[ofs : ofs + gs.size], pooled[n].shape).astype(
                np.float32
            )
            ofs += gs.size
    return masks


def shrink_mask(
    weights: dict[str, np.ndarray],
    masks: dict[str, np.ndarray],
    dist: SparsityDistribution,
) -> dict[str, np.ndarray]:
    """Tighten existing masks to `dist.target`, dropping only inside the
    current support so that supports stay nested over time (GMP rule:
    pruned weights never return)."""
    pooled = {n: w for n, w in weights.items() if n not in dist.keep_dense}
    out = {n: m.copy() for n, m in masks.items()}
    if not pooled:
        return out
    kept = _pool_kept_counts(pooled, dist)

    def tighten(scores: np.ndarray, active: np.ndarray, want: int) -> np.ndarray:
        want = min(want, int(active.sum()))
        masked_scores = np.where(active, scores, -np.inf)
        return _top_keep_mask(masked_scores, want) & active

    if dist.kind in (UNIFORM, ERK):
        for n, w in pooled.items():
            flat = np.abs(w.reshape(-1).astype(np.float64))
            active = masks[n].reshape(-1) != 0.0
            out[n] = (tighten(flat, active, kept[n])).reshape(w.shape).astype(np.float32)
    elif dist.kind == GLOBAL:
        names = list(pooled)
        scores = np.concatenate([np.abs(pooled[n].reshape(-1).astype(np.float64)) for n in names])
        active = np.concatenate([masks[n].reshape(-1) != 0.0 for n in names])
        keep = tighten(scores, active, kept)
        ofs = 0
        for n in names:
            size = pooled[n].size
            out[n] = keep[ofs : ofs + size].reshape(pooled[n].shape).astype(np.float32)
            ofs += size
    else:  # block4-global: drop whole groups inside the active group set
        names = list(pooled)
        group_scores = [_block_scores(pooled[n]) for n in names]
        group_active = []
        for n in names:
            flat = masks[n].reshape(-1) != 0.0
            n_groups = (flat.size + BLOCK - 1) // BLOCK
            padded = np.zeros(n_groups * BLOCK, dtype=bool)
            padded[: flat.size] = flat
            group_active.append(padded.reshape(n_groups, BLOCK).any(axis=1))
        keep = tighten(np.concatenate(group_scores), np.concatenate(group_active), kept)
        ofs = 0
        for n, gs in zip(names, group_scores):
            out[n] = _expand_block_keep(keep[ofs : ofs + gs.size], pooled[n].shape).astype(
                np.float32
            )
            ofs += gs.size
    return out


# -- GMP ---------------------------------------------------------------------


@dataclass(frozen=True)
class GmpState:
    s_final: float
    ramp_start: int = 0
    ramp_end: int = 75
    update_every: int = 5

    def __post_init__(self):
        if self.ramp_end <= self.ramp_start:
            raise ScheduleError("GMP ramp must end after it starts")


def gmp_sparsity_at(state: GmpState, t_epoch: int) -> float:
    """Cubic ramp from 0 to s_final, stepping only every `update_every` epochs;
    s_final exactly from the ramp end onward (the mask freezes there)."""
    if t_epoch >= state.ramp_end:
        return state.s_final
    tq = (t_epoch // state.update_every) * state.update_every
    p = (tq - state.ramp_start) / (state.ramp_end - state.ramp_start)
    p = min(max(p, 0.0), 1.0)
    return state.s_final * (1.0 - (1.0 - p) ** 3)


# -- RigL --------------------------------------------------------------------


@dataclass(frozen=True)
class RiglState:
    alpha: float = 0.3
    t_end: int = 75
    delta_t: int = 1
    layer_sparsity: dict[str, float] = field(default_factory=dict)


def rigl_fraction(t: float, alpha: float, t_end: float, s_l: float) -> float:
    """Cosine-annealed update fraction (alpha/2)(1 + cos(pi t/T_end))(1 - s_l)."""
    if t < 0 or t > t_end:
        raise ScheduleError(f"t {t} outside [0, {t_end}]")
    return (alpha / 2.0) * (1.0 + math.cos(math.pi * t / t_end)) * (1.0 - s_l)


def rigl_step(
    weights: np.ndarray,
    grads: np.ndarray,
    mask: np.ndarray,
    fraction: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Drop the k lowest-|w| active entries, grow the k highest-|grad| inactive
    ones; k = round(fraction * active count). Returns (new mask, changed flags).
    """
    if not 0.0 <= fraction <= 1.0:
        raise ScheduleError(f"update fraction {fraction} outside [0, 1]")
    flat_w = np.abs(weights.reshape(-1).astype(np.float64))
    flat_g = np.abs(grads.reshape(-1).astype(np.float64))
    active = mask.reshape(-1) != 0.0
    n_active = int(active.sum())
    n_inactive = active.size - n_active
    k = int(math.floor(fraction * n_active + 0.5))
    if k > n_inactive:
        log.warning("rigl_step: k=%d capped at inactive count %d", k, n_inactive)
        k = n_inactive
    new = active.copy()
    if k > 0:
        idx = np.arange(active.size)
        act_idx = idx[active]
        drop_order = np.lexsort((act_idx, flat_w[active]))
        dropped = act_idx[drop_order[:k]]
        inact_idx = idx[~active]
        grow_order = np.lexsort((inact_idx, -flat_g[~active]))
        grown = inact_idx[grow_order[:k]]
        new[dropped] = False
        new[grown] = True
    changed = new != active
    return new.reshape(mask.shape).astype(np.float32), changed.reshape(mask.shape)


# -- AC/DC -------------------------------------------------------------------


@dataclass(frozen=True)
class ProgressiveRamp:
    start_epoch: int
    end_epoch: int
    start_sparsity: float = 0.9


@dataclass(frozen=True)
class AcdcSchedule:
    total_epochs: int
    target: float
    warmup: int = 10
    phase_len: int = 5
    last_decompression: int = 15
    last_compression: int = 10
    decompression_sparsity: float = 0.0
    ramp: ProgressiveRamp | None = None

    def __post_init__(self):
        if not 0.0 <= self.decompression_sparsity <= self.target:
            raise ScheduleError("decompression sparsity must lie in [0, target]")


@dataclass(frozen=True)
class Phase:
    kind: str
    start: int
    length: int

    @property
    def end(self) -> int:
        return self.start + self.length


def acdc_phases(cfg: AcdcSchedule) -> list[Phase]:
    """Phase list built back to front: the run ends with `last_compression`
    compressed epochs preceded by `last_decompression` decompressed ones; the
    middle is tiled with alternating phases starting compressed, the first of
    which absorbs any remainder."""
    minimum = cfg.warmup + cfg.last_decompression + cfg.last_compression + 2 * cfg.phase_len
    if cfg.total_epochs < minimum:
        raise ScheduleError(
            f"AC/DC needs at least {minimum} epochs, got {cfg.total_epochs}"
        )
    phases: list[Phase] = []
    if cfg.warmup > 0:
        phases.append(Phase(DENSE_WARMUP, 0, cfg.warmup))
    mid_start = cfg.warmup
    mid_end = cfg.total_epochs - cfg.last_decompression - cfg.last_compression
    span = mid_end - mid_start
    n_phases = span // cfg.phase_len
    rem = span % cfg.phase_len
    start = mid_start
    for i in range(n_phases):
        length = cfg.phase_len + (rem if i == 0 else 0)
        kind = COMPRESSED if i % 2 == 0 else DECOMPRESSED
        phases.append(Phase(kind, start, length))
        start += length
    phases.append(Phase(DECOMPRESSED, mid_end, cfg.last_decompression))
    phases.append(Phase(COMPRESSED, mid_end + cfg.last_decompression, cfg.last_compression))
    return phases


def progressive_target(t_epoch: int, ramp: ProgressiveRamp, s_final: float) -> float:
    """Compressed-phase target interpolated linearly from the ramp start."""
    if ramp.end_epoch <= ramp.start_epoch:
        return s_final
    frac = (t_epoch - ramp.start_epoch) / (ramp.end_epoch - ramp.start_epoch)
    frac = min(max(frac, 0.0), 1.0)
    return ramp.start_sparsity + (s_final - ramp.start_sparsity) * frac


def acdc_apply(
    phase_kind: str,
    weights: dict[str, np.ndarray],
    dist: SparsityDistribution,
    decompression_sparsity: float = 0.0,
) -> dict[str, np.ndarray] | None:
    """Masks for a new phase: fresh magnitude masks at the phase's sparsity.

    Compression recomputes masks at the full target; decompression returns
    None (fully dense) unless a minimal decompression sparsity is set.
    """
    if phase_kind == COMPRESSED:
        return magnitude_mask(weights, dist)
    if phase_kind in (DECOMPRESSED, DENSE_WARMUP):
        if decompression_sparsity == 0.0:
            return None
        return magnitude_mask(weights, dist.with_target(decompression_sparsity))
    raise ScheduleError(f"unknown AC/DC phase kind {phase_kind!r}")
