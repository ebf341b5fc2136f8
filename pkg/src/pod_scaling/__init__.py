"""Desk-scale simulator of data-parallel training on a 2-D torus of accelerator cores."""

from .errors import ConfigError, DivergenceError, InvariantViolation, NonFiniteError, PartitionError, ShapeError
from .models import CostRow, EquivalenceRow, MetricsRecord, RunSummary
from .tensor_core import ConvParams, DType, Padding, Tensor, bf16_round, conv2d, matmul
from .torus_sim import GradientSet, LinkCostParams, TorusTopology, all_reduce_2d, estimate_summation_time

__all__ = [
    "ConfigError",
    "ConvParams",
    "CostRow",
    "DType",
    "DivergenceError",
    "EquivalenceRow",
    "GradientSet",
    "InvariantViolation",
    "LinkCostParams",
    "MetricsRecord",
    "NonFiniteError",
    "Padding",
    "PartitionError",
    "RunSummary",
    "ShapeError",
    "Tensor",
    "TorusTopology",
    "all_reduce_2d",
    "bf16_round",
    "conv2d",
    "estimate_summation_time",
    "matmul",
]
