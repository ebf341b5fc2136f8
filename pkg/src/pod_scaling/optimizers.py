"""LARS (scaled and unscaled momentum), Adam, the learning-rate schedule and
weight-update sharding.

Trust ratio, per weight tensor::

    lam = eps * ||w|| / (||g|| + beta * ||w||)

Scaled momentum::

    v = m * v + (g + beta * w)
    w = w - eta * lam * v

Unscaled momentum::

    v = m * v + eta * lam * (g + beta * w)
    w = w - v

``eta`` is the scheduled global rate. With ``m = 0`` both forms perform the
same float32 operations in the same order, so their results agree bit for
bit.

Weight-update sharding assigns whole tensors to cores, so the per-tensor
norms LARS needs are computed from complete tensors and a sharded update is
bitwise identical to a replicated one.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NonFiniteError, ShapeError
from .tensor_core import Tensor
from .torus_sim import GradientSet, TorusTopology, ring_all_gather

logger = logging.getLogger(__name__)


class LarsVariant(str, Enum):
    SCALED = "scaled"
    UNSCALED = "unscaled"


class ScheduleKind(str, Enum):
    POLY2 = "poly2"
    CONSTANT = "constant"


@dataclass(frozen=True)
class LarsConfig:
    epsilon: float = 0.001
    weight_decay: float = 1e-4
    momentum: float = 0.9
    base_lr: float = 1.0
    warmup_epochs: float = 0.0
    total_epochs: float = 1.0
    schedule: ScheduleKind = ScheduleKind.POLY2
    variant: LarsVariant = LarsVariant.SCALED

    def __post_init__(self) -> None:
        object.__setattr__(self, "schedule", ScheduleKind(self.schedule))
        object.__setattr__(self, "variant", LarsVariant(self.variant))
        if not self.epsilon > 0:
            raise ValueError(f"LARS epsilon must be positive, got {self.epsilon}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.total_epochs <= 0:
            raise ValueError(f"total_epochs must be positive, got {self.total_epochs}")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError(
                f"warmup_epochs {self.warmup_epochs} must lie within [0, total_epochs={self.total_epochs}]"
            )


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    warmup_steps: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError(f"beta1/beta2 must lie in [0, 1), got {self.beta1}/{self.beta2}")
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.adam_epsilon <= 0:
            raise ValueError(f"adam_epsilon must be positive, got {self.adam_epsilon}")
        if self.warmup_steps < 0:
            raise ValueError(f"warmup_steps must be non-negative, got {self.warmup_steps}")


# name -> (base_lr, warmup_epochs, momentum, train epochs, variant)
_TABLE_PRESETS = {
    "scaled-31.2": (31.2, 25.0, 0.9, 72.8, LarsVariant.SCALED),
    "unscaled-31.2": (31.2, 25.0, 0.9, 70.6, LarsVariant.UNSCALED),
    "unscaled-29.0-m0.929": (29.0, 18.0, 0.929, 64.0, LarsVariant.UNSCALED),
}


def preset_names() -> List[str]:
    return list(_TABLE_PRESETS)


def lars_preset(name: str, schedule_scale: float = 1.0) -> LarsConfig:
    """One of the ResNet-50 LARS presets; ``schedule_scale`` shrinks warmup and total epochs."""

    try:
        base_lr, warmup, momentum, epochs, variant = _TABLE_PRESETS[name]
    except KeyError as exc:
        raise ValueError(f"unknown optimizer preset {name!r}; known: {preset_names()}") from exc
    if schedule_scale <= 0:
        raise ValueError(f"schedule_scale must be positive, got {schedule_scale}")
    return LarsConfig(
        base_lr=base_lr,
        warmup_epochs=warmup * schedule_scale,
        total_epochs=epochs * schedule_scale,
        momentum=momentum,
        variant=variant,
    )


def lr_schedule(epoch: float, cfg: LarsConfig) -> float:
    """Linear warmup to ``base_lr`` then quadratic decay to zero at ``total_epochs``."""

    epoch = min(max(epoch, 0.0), cfg.total_epochs)
    if cfg.schedule is ScheduleKind.CONSTANT:
        return cfg.base_lr
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        return cfg.base_lr * epoch / cfg.warmup_epochs
    if cfg.total_epochs == cfg.warmup_epochs:
        return cfg.base_lr
    remaining = (cfg.total_epochs - epoch) / (cfg.total_epochs - cfg.warmup_epochs)
    return cfg.base_lr * remaining ** 2


# ---------------------------------------------------------------------------
# Per-tensor steps
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LarsSlot:
    velocity: np.ndarray


@dataclass(frozen=True, eq=False)
class AdamSlot:
    first_moment: np.ndarray
    second_moment: np.ndarray


Slot = Union[LarsSlot, AdamSlot]


def _as_f32(value: Union[Tensor, np.ndarray]) -> np.ndarray:
    array = value.data if isinstance(value, Tensor) else value
    return np.ascontiguousarray(array, dtype=np.float32)


def _check_step_inputs(w: np.ndarray, g: np.ndarray) -> None:
    if w.shape != g.shape:
        raise ShapeError(f"weight shape {w.shape} != gradient shape {g.shape}")
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(g))):
        raise NonFiniteError("optimizer received non-finite weights or gradients")


def _l2_norm(x: np.ndarray) -> np.float32:
    return np.float32(math.sqrt(float(np.sum(np.square(x, dtype=np.float64)))))


def lars_trust_ratio(w: Union[Tensor, np.ndarray], g: Union[Tensor, np.ndarray], cfg: LarsConfig) -> np.float32:
    """Layer-wise trust ratio; zero when ||w|| or the denominator is zero."""

    w32, g32 = _as_f32(w), _as_f32(g)
    w_norm = _l2_norm(w32)
    g_norm = _l2_norm(g32)
    beta = np.float32(cfg.weight_decay)
    denominator = g_norm + beta * w_norm
    if w_norm == 0 or denominator == 0:
        return np.float32(0.0)
    return np.float32(np.float32(cfg.epsilon) * w_norm / denominator)


def _lars_common(w, g, slot: LarsSlot, cfg: LarsConfig, eta: float):
    w32, g32 = _as_f32(w), _as_f32(g)
    _check_step_inputs(w32, g32)
    if slot.velocity.shape != w32.shape:
        raise ShapeError(f"velocity shape {slot.velocity.shape} != weight shape {w32.shape}")
    step_scale = np.float32(np.float32(eta) * lars_trust_ratio(w32, g32, cfg))
    update = g32 + np.float32(cfg.weight_decay) * w32
    momentum_term = np.float32(cfg.momentum) * slot.velocity
    return w32, update, momentum_term, step_scale


def lars_scaled_step(
    w: Union[Tensor, np.ndarray],
    g: Union[Tensor, np.ndarray],
    slot: LarsSlot,
    cfg: LarsConfig,
    eta: float,
) -> Tuple[np.ndarray, LarsSlot]:
    w32, update, momentum_term, step_scale = _lars_common(w, g, slot, cfg, eta)
    velocity = momentum_term + update
    return w32 - step_scale * velocity, LarsSlot(velocity=velocity)


def lars_unscaled_step(
    w: Union[Tensor, np.ndarray],
    g: Union[Tensor, np.ndarray],
    slot: LarsSlot,
    cfg: LarsConfig,
    eta: float,
) -> Tuple[np.ndarray, LarsSlot]:
    w32, update, momentum_term, step_scale = _lars_common(w, g, slot, cfg, eta)
    velocity = momentum_term + step_scale * update
    return w32 - velocity, LarsSlot(velocity=velocity)


def adam_learning_rate(cfg: AdamConfig, t: int) -> float:
    if cfg.warmup_steps and t < cfg.warmup_steps:
        return cfg.lr * t / cfg.warmup_steps
    return cfg.lr


def adam_step(
    w: Union[Tensor, np.ndarray],
    g: Union[Tensor, np.ndarray],
    slot: AdamSlot,
    cfg: AdamConfig,
    t: int,
) -> Tuple[np.ndarray, AdamSlot]:
    """Bias-corrected Adam; ``t`` is the 1-based step number."""

    w32, g32 = _as_f32(w), _as_f32(g)
    _check_step_inputs(w32, g32)
    if t < 1:
        raise ValueError(f"Adam step number must be >= 1, got {t}")
    beta1, beta2 = np.float32(cfg.beta1), np.float32(cfg.beta2)
    first = beta1 * slot.first_moment + (np.float32(1.0) - beta1) * g32
    second = beta2 * slot.second_moment + (np.float32(1.0) - beta2) * (g32 * g32)
    first_hat = first / np.float32(1.0 - cfg.beta1 ** t)
    second_hat = second / np.float32(1.0 - cfg.beta2 ** t)
    lr = np.float32(adam_learning_rate(cfg, t))
    new_w = w32 - lr * first_hat / (np.sqrt(second_hat) + np.float32(cfg.adam_epsilon))
    return new_w, AdamSlot(first_moment=first, second_moment=second)


# ---------------------------------------------------------------------------
# Optimizer objects
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OptimizerState:
    """Per-tensor slots keyed by weight name, plus the number of steps taken."""

    t: int = 0
    slots: Mapping[str, Slot] = field(default_factory=dict)


class LarsOptimizer:
    def __init__(self, cfg: LarsConfig, steps_per_epoch: int = 1) -> None:
        if steps_per_epoch < 1:
            raise ValueError(f"steps_per_epoch must be positive, got {steps_per_epoch}")
        self.cfg = cfg
        self.steps_per_epoch = steps_per_epoch

    @property
    def name(self) -> str:
        return f"lars-{self.cfg.variant.value}"

    def init_slot(self, w: np.ndarray) -> LarsSlot:
        return LarsSlot(velocity=np.zeros(w.shape, dtype=np.float32))

    def init_state(self, weights: GradientSet) -> OptimizerState:
        return OptimizerState(t=0, slots={n: self.init_slot(t.data) for n, t in zip(weights.names, weights.tensors)})

    def rate(self, t: int) -> float:
        return lr_schedule(t / self.steps_per_epoch, self.cfg)

    def apply(self, w: np.ndarray, g: np.ndarray, slot: LarsSlot, t: int) -> Tuple[np.ndarray, LarsSlot]:
        """Update one tensor as step number ``t`` (1-based)."""
        eta = self.rate(t - 1)
        if self.cfg.variant is LarsVariant.SCALED:
            return lars_scaled_step(w, g, slot, self.cfg, eta)
        return lars_unscaled_step(w, g, slot, self.cfg, eta)


class AdamOptimizer:
    def __init__(self, cfg: AdamConfig) -> None:
        self.cfg = cfg

    @property
    def name(self) -> str:
        return "adam"

    def init_slot(self, w: np.ndarray) -> AdamSlot:
        return AdamSlot(
            first_moment=np.zeros(w.shape, dtype=np.float32),
            second_moment=np.zeros(w.shape, dtype=np.float32),
        )

    def init_state(self, weights: GradientSet) -> OptimizerState:
        return OptimizerState(t=0, slots={n: self.init_slot(t.data) for n, t in zip(weights.names, weights.tensors)})

    def apply(self, w: np.ndarray, g: np.ndarray, slot: AdamSlot, t: int) -> Tuple[np.ndarray, AdamSlot]:
        return adam_step(w, g, slot, self.cfg, t)


Optimizer = Union[LarsOptimizer, AdamOptimizer]


def optimizer_step(
    optimizer: Optimizer,
    weights: GradientSet,
    grads: GradientSet,
    state: OptimizerState,
) -> Tuple[GradientSet, OptimizerState]:
    """Replicated update of every tensor."""

    if not weights.same_structure(grads):
        raise ShapeError("weights and gradients have different structure")
    t = state.t + 1
    new_tensors: List[Tensor] = []
    slots: Dict[str, Slot] = dict(state.slots)
    for name, w, g in zip(weights.names, weights.tensors, grads.tensors):
        new_w, slots[name] = optimizer.apply(w.data, g.data, state.slots[name], t)
        new_tensors.append(Tensor(data=new_w))
    return GradientSet(names=weights.names, tensors=tuple(new_tensors)), OptimizerState(t=t, slots=slots)


# ---------------------------------------------------------------------------
# Weight-update sharding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightShardLayout:
    """Whole tensors assigned to cores; ``order`` is the flattening order.

    ``order`` lists core 0's tensors first, then core 1's and so on, so each
    core's shard is one contiguous range of the flat parameter vector.
    """

    order: Tuple[str, ...]
    assignment: Tuple[Tuple[str, ...], ...]
    ranges: Tuple[Tuple[int, int], ...]

    @property
    def cores(self) -> int:
        return len(self.assignment)

    def owner(self, name: str) -> int:
        for core, names in enumerate(self.assignment):
            if name in names:
                return core
        raise KeyError(name)


def plan_weight_shards(weights: GradientSet, cores: int) -> WeightShardLayout:
    """Greedy size-balanced assignment: largest tensor first to the least loaded core.

    Ties go to the lowest core id; within a core tensors keep their original order.
    """

    if cores < 1:
        raise ValueError(f"need at least one core, got {cores}")
    sizes = {name: t.size for name, t in zip(weights.names, weights.tensors)}
    load = [0] * cores
    owned: List[List[str]] = [[] for _ in range(cores)]
    for name in sorted(weights.names, key=lambda n: (-sizes[n], weights.names.index(n))):
        core = min(range(cores), key=lambda c: (load[c], c))
        owned[core].append(name)
        load[core] += sizes[name]
    assignment = tuple(tuple(n for n in weights.names if n in owned[c]) for c in range(cores))
    order = tuple(name for names in assignment for name in names)
    ranges: List[Tuple[int, int]] = []
    start = 0
    for names in assignment:
        stop = start + sum(sizes[n] for n in names)
        ranges.append((start, stop))
        start = stop
    return WeightShardLayout(order=order, assignment=assignment, ranges=tuple(ranges))


def sharded_weight_update(
    full_grads: Sequence[GradientSet],
    weights: GradientSet,
    state: OptimizerState,
    layout: WeightShardLayout,
    optimizer: Optimizer,
    topo: TorusTopology,
) -> Tuple[List[GradientSet], OptimizerState]:
    """Each core updates only its own tensors, then an all-gather rebuilds the full weights.

    Returns the per-core weight sets (bitwise identical) and the merged
    optimizer state, in which every slot was written by exactly one core.
    """

    cores = topo.size
    if len(full_grads) != cores:
        raise ShapeError(f"{len(full_grads)} gradient sets for {cores} cores")
    if layout.cores != cores:
        raise ShapeError(f"layout shards over {layout.cores} cores, topology has {cores}")
    if sorted(layout.order) != sorted(weights.names):
        raise ShapeError("layout does not cover exactly the weight tensors")
    for core, grads in enumerate(full_grads):
        if not grads.same_structure(weights):
            raise ShapeError(f"core {core} gradients do not match the weight structure")

    t = state.t + 1
    slots: Dict[str, Slot] = dict(state.slots)
    shards: Dict[int, Tensor] = {}
    for core in range(cores):
        pieces: List[np.ndarray] = []
        for name in layout.assignment[core]:
            new_w, slots[name] = optimizer.apply(
                weights[name].data, full_grads[core][name].data, state.slots[name], t
            )
            pieces.append(new_w.reshape(-1))
        flat = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.float32)
        shards[core] = Tensor(data=flat)
        logger.debug("core %d updated %d tensors", core, len(layout.assignment[core]))

    gathered = ring_all_gather(shards, topo.cores())
    ordered = GradientSet(names=layout.order, tensors=tuple(weights[n] for n in layout.order))
    per_core: List[GradientSet] = []
    for core in range(cores):
        updated = ordered.unflatten(gathered[core].flat)
        per_core.append(GradientSet(names=weights.names, tensors=tuple(updated[n] for n in weights.names)))
    return per_core, OptimizerState(t=t, slots=slots)


@dataclass(frozen=True)
class OptimizerSpec:
    """Either a preset name or an explicit LARS/Adam configuration."""

    preset: Optional[str] = None
    lars: Optional[LarsConfig] = None
    adam: Optional[AdamConfig] = None
    schedule_scale: float = 1.0

    def label(self) -> str:
        if self.preset:
            return self.preset
        if self.lars is not None:
            return f"lars-{self.lars.variant.value}"
        return "adam"


def resolve_optimizer(spec: OptimizerSpec, steps_per_epoch: int = 1) -> Optimizer:
    if spec.preset is not None:
        return LarsOptimizer(lars_preset(spec.preset, spec.schedule_scale), steps_per_epoch)
    if spec.lars is not None:
        cfg = spec.lars
        if spec.schedule_scale != 1.0:
            cfg = replace(
                cfg,
                warmup_epochs=cfg.warmup_epochs * spec.schedule_scale,
                total_epochs=cfg.total_epochs * spec.schedule_scale,
            )
        return LarsOptimizer(cfg, steps_per_epoch)
    if spec.adam is not None:
        return AdamOptimizer(spec.adam)
    raise ValueError("optimizer spec names neither a preset nor an explicit config")
