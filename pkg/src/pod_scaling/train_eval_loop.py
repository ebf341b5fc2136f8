"""Data-parallel train-and-eval loop over a simulated torus.

Every step splits the global batch into per-core batches, runs the network on
each core, sums gradients with the 2-D all-reduce and applies the optimizer
with weight-update sharding. Evaluation runs on the same cores every
``eval_every_epochs`` epochs and at the last epoch; the eval set is padded
with zero examples to whole rounds and the padding is masked out of the
accuracy.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DivergenceError, InvariantViolation, NonFiniteError, ShapeError
from .models import MetricsRecord
from .networks import BnState, Network
from .optimizers import Optimizer, plan_weight_shards, sharded_weight_update
from .torus_sim import GradientSet, TorusTopology, all_reduce_2d

logger = logging.getLogger(__name__)

DEFAULT_EVAL_EVERY_EPOCHS = 4


@dataclass(frozen=True)
class TrainLoopConfig:
    total_epochs: int
    per_core_batch: int
    per_core_eval_batch: int = 8
    eval_every_epochs: int = DEFAULT_EVAL_EVERY_EPOCHS
    target_metric: Optional[float] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if self.per_core_batch < 1 or self.per_core_eval_batch < 1:
            raise ValueError("per-core batch sizes must be >= 1")
        if self.eval_every_epochs < 1:
            raise ValueError(f"eval_every_epochs must be >= 1, got {self.eval_every_epochs}")
        if self.target_metric is not None and not 0.0 < self.target_metric <= 1.0:
            raise ValueError(f"target_metric must lie in (0, 1], got {self.target_metric}")


@dataclass(frozen=True, eq=False)
class ClassificationTask:
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray

    @property
    def classes(self) -> int:
        return int(max(self.train_y.max(), self.eval_y.max())) + 1


def make_classification_data(
    seed: int,
    n_train: int,
    n_eval: int,
    shape: Sequence[int],
    classes: int,
    separation: float = 1.0,
) -> ClassificationTask:
    """Gaussian clusters: one random mean per class, unit noise around it."""

    if classes < 2:
        raise ValueError(f"need at least two classes, got {classes}")
    rng = np.random.default_rng(seed)
    shape = tuple(shape)
    means = rng.normal(0.0, separation, size=(classes,) + shape)

    def sample(count: int) -> Tuple[np.ndarray, np.ndarray]:
        labels = rng.integers(0, classes, size=count)
        values = means[labels] + rng.normal(0.0, 1.0, size=(count,) + shape)
        return values.astype(np.float32), labels.astype(np.int64)

    train_x, train_y = sample(n_train)
    eval_x, eval_y = sample(n_eval)
    return ClassificationTask(train_x=train_x, train_y=train_y, eval_x=eval_x, eval_y=eval_y)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EvalDataset:
    inputs: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    real_count: int
    cores: int
    per_core_batch: int

    @property
    def padded_count(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def rounds(self) -> int:
        return self.padded_count // (self.cores * self.per_core_batch)

    def round_shards(self, round_index: int) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """(inputs, labels, mask) for each core in one eval round."""

        base = round_index * self.cores * self.per_core_batch
        shards = []
        for core in range(self.cores):
            rows = slice(base + core * self.per_core_batch, base + (core + 1) * self.per_core_batch)
            shards.append((self.inputs[rows], self.labels[rows], self.mask[rows]))
        return shards


def pad_eval_dataset(inputs: np.ndarray, labels: np.ndarray, cores: int, per_core_batch: int) -> EvalDataset:
    """Zero-pad to the next multiple of ``cores * per_core_batch``; mask marks real rows."""

    if cores < 1 or per_core_batch < 1:
        raise ValueError(f"cores and per_core_batch must be >= 1, got {cores}, {per_core_batch}")
    real = inputs.shape[0]
    if real == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if labels.shape != (real,):
        raise ShapeError(f"labels shape {labels.shape} does not match {real} inputs")
    unit = cores * per_core_batch
    padded = math.ceil(real / unit) * unit
    extra = padded - real
    padded_inputs = np.concatenate([inputs, np.zeros((extra,) + inputs.shape[1:], dtype=inputs.dtype)])
    padded_labels = np.concatenate([labels, np.zeros(extra, dtype=labels.dtype)])
    mask = np.arange(padded) < real
    return EvalDataset(
        inputs=padded_inputs,
        labels=padded_labels,
        mask=mask,
        real_count=real,
        cores=cores,
        per_core_batch=per_core_batch,
    )


def masked_top1(
    logits: Sequence[np.ndarray],
    labels: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
) -> Tuple[int, int]:
    """(correct, real) over every core's rows, skipping masked rows.

    ``np.argmax`` returns the first maximum, so ties go to the lowest class.
    """

    correct = 0
    real = 0
    for core, (scores, truth, mask) in enumerate(zip(logits, labels, masks)):
        scores = np.asarray(scores)
        if scores.ndim != 2 or scores.shape[1] == 0:
            raise ShapeError(f"core {core} logits must be [B, C] with C > 0, got shape {scores.shape}")
        if truth.shape != (scores.shape[0],) or mask.shape != (scores.shape[0],):
            raise ShapeError(f"core {core} labels/mask do not match {scores.shape[0]} rows")
        hits = np.argmax(scores, axis=1) == truth
        correct += int(np.count_nonzero(hits & mask))
        real += int(np.count_nonzero(mask))
    return correct, real


def evaluate(network: Network, params: GradientSet, state: Optional[BnState], eval_ds: EvalDataset) -> float:
    correct = 0
    real = 0
    for round_index in range(eval_ds.rounds):
        shards = eval_ds.round_shards(round_index)
        logits = [network.predict(params, state, x) for x, _, _ in shards]
        c, r = masked_top1(logits, [y for _, y, _ in shards], [m for _, _, m in shards])
        correct += c
        real += r
    return correct / real if real else 0.0


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def steps_per_epoch(n_train: int, global_batch: int) -> int:
    steps = n_train // global_batch
    if steps < 1:
        raise ValueError(f"{n_train} training examples cannot fill one global batch of {global_batch}")
    return steps


def _check_replicas(per_core: Sequence[GradientSet]) -> None:
    reference = per_core[0].flatten()
    for core, weights in enumerate(per_core[1:], start=1):
        flat = weights.flatten()
        if not np.array_equal(flat.view(np.uint32), reference.view(np.uint32)):
            diff = np.abs(flat.astype(np.float64) - reference)
            raise InvariantViolation(
                f"core {core} weights differ from core 0 after all-gather",
                float(diff.max()),
                int(np.argmax(diff)),
            )


def run_train_and_eval(
    network: Network,
    task: ClassificationTask,
    eval_ds: EvalDataset,
    optimizer: Optimizer,
    topo: TorusTopology,
    loop: TrainLoopConfig,
) -> List[MetricsRecord]:
    """Train with data parallelism over ``topo``; one MetricsRecord per scheduled eval."""

    cores = topo.size
    global_batch = loop.per_core_batch * cores
    n_train = task.train_x.shape[0]
    steps = steps_per_epoch(n_train, global_batch)
    rng = np.random.default_rng(loop.seed)
    params = network.init_params(rng)
    net_state = network.init_state()
    opt_state = optimizer.init_state(params)
    layout = plan_weight_shards(params, cores)
    logger.info(
        "Training %s on %dx%d cores, global batch %d, %d steps/epoch",
        type(network).__name__, topo.rows, topo.cols, global_batch, steps,
    )

    records: List[MetricsRecord] = []
    step = 0
    for epoch in range(1, loop.total_epochs + 1):
        order = rng.permutation(n_train)
        losses: List[float] = []
        for s in range(steps):
            batch = order[s * global_batch:(s + 1) * global_batch]
            shards = [task.train_x[batch[c * loop.per_core_batch:(c + 1) * loop.per_core_batch]] for c in range(cores)]
            labels = [task.train_y[batch[c * loop.per_core_batch:(c + 1) * loop.per_core_batch]] for c in range(cores)]
            result = network.forward_backward(params, net_state, shards, labels)
            step += 1
            if not math.isfinite(result.loss):
                raise DivergenceError(step, result.loss)
            summed = all_reduce_2d(result.grads, topo)
            try:
                per_core, opt_state = sharded_weight_update(summed, params, opt_state, layout, optimizer, topo)
            except NonFiniteError as exc:
                raise DivergenceError(step, result.loss) from exc
            _check_replicas(per_core)
            params = per_core[0]
            net_state = result.state
            losses.append(result.loss)
            logger.debug("step %d loss %.6f", step, result.loss)

        if epoch % loop.eval_every_epochs and epoch != loop.total_epochs:
            continue
        metric = evaluate(network, params, net_state, eval_ds)
        record = MetricsRecord(epoch=epoch, train_loss=float(np.mean(losses)), eval_metric=metric, wall_steps=step)
        records.append(record)
        logger.info("epoch %d: loss %.4f, eval %.4f", epoch, record.train_loss, metric)
        if loop.target_metric is not None and metric >= loop.target_metric:
            logger.info("Target %.3f reached at epoch %d", loop.target_metric, epoch)
            break
    return records


def epochs_to_target(records: Sequence[MetricsRecord], target: float) -> Optional[int]:
    for record in records:
        if record.eval_metric >= target:
            return record.epoch
    return None
