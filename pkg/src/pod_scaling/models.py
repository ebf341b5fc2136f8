"""Records produced by experiments and consumed by the report writers."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Tuple


@dataclass(frozen=True)
class MetricsRecord:
    """One scheduled evaluation of a training run."""

    epoch: int
    train_loss: float
    eval_metric: float
    wall_steps: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.eval_metric <= 1.0:
            raise ValueError(f"eval_metric must lie in [0, 1], got {self.eval_metric}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class CostRow:
    """One estimate of the gradient-summation time model."""

    scenario: str
    topology: str
    total_bytes: int
    chunks: int
    pipelined: bool
    seconds: float
    speedup: float


@dataclass(frozen=True)
class EquivalenceRow:
    """Sharded result compared against its monolithic oracle."""

    check: str
    case: str
    max_deviation: float
    tolerance: float = 0.0
    location: Tuple[int, ...] = field(default_factory=tuple)

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tolerance


@dataclass(frozen=True)
class RunSummary:
    """Outcome of one training run (one optimizer, one batch size, one seed)."""

    label: str
    seed: int
    global_batch: int
    epochs_to_target: Optional[int]
    final_metric: float
    steps: int


@dataclass(frozen=True)
class BatchEpochRow:
    global_batch: int
    epochs_to_target: Optional[float]
    runs_reaching_target: int
    runs: int
    monotone_violation: bool = False


@dataclass(frozen=True)
class LoadBalanceRow:
    seed: int
    bucketized_ratio: float
    random_ratio: float
    bucketized_padding: float
    random_padding: float


@dataclass(frozen=True)
class PresetRow:
    """Optimizer preset aggregated over seeds."""

    preset: str
    runs: int
    runs_reaching_target: int
    mean_epochs_to_target: Optional[float]
    mean_final_metric: float


@dataclass(frozen=True)
class PipelineSummaryRow:
    seeds: int
    bucketized_not_worse: float
    mean_bucketized_ratio: float
    mean_random_ratio: float
    eval_padded_len: int
    eval_trimmed_len: int
    host_batch_counts: Tuple[int, ...] = field(default_factory=tuple)
