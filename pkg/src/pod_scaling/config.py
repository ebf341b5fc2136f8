"""Experiment configuration: one strict JSON document per experiment.

Every section is a frozen dataclass whose field defaults are the documented
defaults. Unknown keys, wrong types and out-of-range values raise
``ConfigError`` naming the dotted path of the offending field.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from .errors import ConfigError
from .optimizers import OptimizerSpec, preset_names
from .spatial_partition import ShardSpec, plan_partition
from .tensor_core import ConvParams
from .torus_sim import LinkCostParams

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1


class ExperimentKind(str, Enum):
    TRAIN = "train"
    SHARD_EQUIV = "shard_equiv"
    COLLECTIVE_SWEEP = "collective_sweep"
    OPTIMIZER_COMPARE = "optimizer_compare"
    PIPELINE_STUDY = "pipeline_study"


class ModelKind(str, Enum):
    CONVNET = "convnet"
    LSTM = "lstm"


@dataclass(frozen=True)
class TopologyConfig:
    rows: int = 1
    cols: int = 1

    @property
    def cores(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class BatchConfig:
    global_batch: int = 0
    per_core: int = 0


@dataclass(frozen=True)
class TaskConfig:
    """Synthetic classification task and the network trained on it."""

    model: ModelKind = ModelKind.CONVNET
    epochs: int = 8
    target: Optional[float] = None
    n_train: int = 512
    n_eval: int = 100
    classes: int = 4
    separation: float = 1.0
    input_shape: Tuple[int, ...] = (8, 8, 2)
    channels: int = 4
    hidden: int = 8
    bf16_conv: bool = False
    per_core_eval_batch: int = 8


@dataclass(frozen=True)
class TrainSection:
    task: TaskConfig = field(default_factory=TaskConfig)
    batch_sweep: Tuple[int, ...] = ()
    seeds: Tuple[int, ...] = ()


@dataclass(frozen=True)
class ShardEquivSection:
    kernel_sizes: Tuple[int, ...] = (1, 3, 5, 7)
    grids: Tuple[Tuple[int, int], ...] = ((1, 1), (2, 1), (1, 2), (2, 2))
    cases: int = 20
    extent: int = 8
    in_channels: int = 2
    out_channels: int = 2
    batch: int = 1
    shard_counts: Tuple[int, ...] = (1, 2, 4, 8)
    optimizer_steps: int = 100
    lstm_cases: int = 10
    unsharded_op_fraction: float = 0.1


@dataclass(frozen=True)
class CollectiveSweepSection:
    topologies: Tuple[Tuple[int, int], ...] = ((4, 4),)
    byte_sizes: Tuple[int, ...] = (4_000_000, 100_000_000)
    chunk_counts: Tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    cost: LinkCostParams = field(default_factory=LinkCostParams)


@dataclass(frozen=True)
class OptimizerCompareSection:
    task: TaskConfig = field(default_factory=TaskConfig)
    presets: Tuple[str, ...] = tuple(preset_names())
    seeds: Tuple[int, ...] = (0,)
    schedule_scale: float = 0.1


@dataclass(frozen=True)
class PipelineStudySection:
    corpus: Optional[str] = None
    corpus_size: int = 512
    min_length: int = 1
    max_length: int = 64
    window: int = 8
    per_worker_batch: int = 4
    workers: int = 4
    hosts: int = 2
    seeds: int = 100
    eval_padded_len: int = 256


@dataclass(frozen=True)
class ExperimentConfig:
    kind: ExperimentKind
    seed: int
    version: int = CONFIG_VERSION
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    batch: Optional[BatchConfig] = None
    eval_every_epochs: int = 4
    output: Optional[str] = None
    optimizer: Optional[OptimizerSpec] = None
    train: Optional[TrainSection] = None
    shard_equiv: Optional[ShardEquivSection] = None
    collective_sweep: Optional[CollectiveSweepSection] = None
    optimizer_compare: Optional[OptimizerCompareSection] = None
    pipeline_study: Optional[PipelineStudySection] = None

    def section(self) -> Any:
        return getattr(self, self.kind.value)


# ---------------------------------------------------------------------------
# Generic dataclass <-> dict conversion
# ---------------------------------------------------------------------------


def _convert(value: Any, hint: Any, path: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if value is None:
            return None
        return _convert(value, inner[0], path)
    if origin in (tuple, Tuple):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(path, f"expected {len(args)} items, got {len(value)}")
        return tuple(_convert(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    if isinstance(hint, type) and issubclass(hint, Enum):
        try:
            return hint(value)
        except ValueError as exc:
            allowed = [m.value for m in hint]
            raise ConfigError(path, f"unknown value {value!r}; expected one of {allowed}") from exc
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {hint!r}")


def _build(cls: Any, data: Any, path: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown field")
    kwargs: Dict[str, Any] = {}
    for f in dataclasses.fields(cls):
        dotted = f"{path}.{f.name}" if path else f.name
        if f.name in data:
            kwargs[f.name] = _convert(data[f.name], hints[f.name], dotted)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:  # type: ignore[misc]
            raise ConfigError(dotted, "required field is missing")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(path or "<root>", str(exc)) from exc


def _to_plain(value: Any) -> Any:
    if dataclasses.is_dataclass(value):
        return {f.name: _to_plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return [_to_plain(v) for v in value]
    return value


# ---------------------------------------------------------------------------
# Experiment config
# ---------------------------------------------------------------------------

# JSON spelling -> dataclass field for the batch section.
_BATCH_KEYS = {"global": "global_batch", "per_core": "per_core"}


def _require_positive(section: Any, path: str, names: Tuple[str, ...]) -> None:
    for name in names:
        value = getattr(section, name)
        if value < 1:
            raise ConfigError(f"{path}.{name}", f"must be >= 1, got {value}")


def _validate_task(task: TaskConfig, path: str, batches: Tuple[int, ...]) -> None:
    _require_positive(task, path, ("epochs", "n_train", "n_eval", "channels", "hidden", "per_core_eval_batch"))
    if task.classes < 2:
        raise ConfigError(f"{path}.classes", f"must be >= 2, got {task.classes}")
    if any(d < 1 for d in task.input_shape):
        raise ConfigError(f"{path}.input_shape", f"extents must be >= 1, got {list(task.input_shape)}")
    for size in batches:
        if task.n_train < size:
            raise ConfigError(f"{path}.n_train", f"{task.n_train} examples cannot fill a global batch of {size}")


def _validate_shard_equiv(section: ShardEquivSection) -> None:
    _require_positive(
        section,
        "shard_equiv",
        ("cases", "extent", "in_channels", "out_channels", "batch", "optimizer_steps", "lstm_cases"),
    )
    if not 0.0 <= section.unsharded_op_fraction <= 1.0:
        raise ConfigError(
            "shard_equiv.unsharded_op_fraction", f"must lie in [0, 1], got {section.unsharded_op_fraction}"
        )
    for i, count in enumerate(section.shard_counts):
        if count < 1:
            raise ConfigError(f"shard_equiv.shard_counts[{i}]", f"must be >= 1, got {count}")
    shape = (section.batch, section.extent, section.extent, section.in_channels)
    for j, k in enumerate(section.kernel_sizes):
        try:
            params = ConvParams(k, section.in_channels, section.out_channels)
        except ValueError as exc:
            raise ConfigError(f"shard_equiv.kernel_sizes[{j}]", str(exc)) from exc
        for i, (grid_h, grid_w) in enumerate(section.grids):
            try:
                plan_partition(shape, params, ShardSpec(grid_h, grid_w))
            except ValueError as exc:
                raise ConfigError(f"shard_equiv.grids[{i}]", f"extent {section.extent}, K={k}: {exc}") from exc


def _validate_pipeline_study(section: PipelineStudySection) -> None:
    _require_positive(
        section,
        "pipeline_study",
        ("corpus_size", "min_length", "window", "per_worker_batch", "workers", "hosts", "seeds"),
    )
    if section.corpus is not None:
        return
    if section.max_length < section.min_length:
        raise ConfigError(
            "pipeline_study.max_length", f"{section.max_length} is below min_length {section.min_length}"
        )
    if section.eval_padded_len < section.max_length:
        raise ConfigError(
            "pipeline_study.eval_padded_len",
            f"{section.eval_padded_len} is shorter than max_length {section.max_length}",
        )


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.version != CONFIG_VERSION:
        raise ConfigError("version", f"unsupported version {cfg.version}; expected {CONFIG_VERSION}")
    if cfg.topology.rows < 1 or cfg.topology.cols < 1:
        raise ConfigError("topology", f"rows and cols must be >= 1, got {cfg.topology.rows}x{cfg.topology.cols}")
    if cfg.eval_every_epochs < 1:
        raise ConfigError("eval_every_epochs", f"must be >= 1, got {cfg.eval_every_epochs}")
    for kind in ExperimentKind:
        present = getattr(cfg, kind.value) is not None
        if kind is cfg.kind and not present:
            raise ConfigError(kind.value, f"section required for kind {kind.value!r}")
        if kind is not cfg.kind and present:
            raise ConfigError(kind.value, f"section not allowed for kind {cfg.kind.value!r}")

    if cfg.kind in (ExperimentKind.TRAIN, ExperimentKind.OPTIMIZER_COMPARE):
        if cfg.batch is None:
            raise ConfigError("batch", f"section required for kind {cfg.kind.value!r}")
        task = cfg.section().task
        if task.model is ModelKind.CONVNET and len(task.input_shape) != 3:
            raise ConfigError(f"{cfg.kind.value}.task.input_shape", "convnet inputs are [H, W, C]")
        if task.model is ModelKind.LSTM and len(task.input_shape) != 2:
            raise ConfigError(f"{cfg.kind.value}.task.input_shape", "lstm inputs are [T, F]")
        if task.target is not None and not 0.0 < task.target <= 1.0:
            raise ConfigError(f"{cfg.kind.value}.task.target", f"must lie in (0, 1], got {task.target}")
    if cfg.batch is not None:
        if cfg.batch.per_core < 1:
            raise ConfigError("batch.per_core", f"must be >= 1, got {cfg.batch.per_core}")
        expected = cfg.batch.per_core * cfg.topology.cores
        if cfg.batch.global_batch != expected:
            raise ConfigError(
                "batch.global",
                f"{cfg.batch.global_batch} != per_core {cfg.batch.per_core} x {cfg.topology.cores} cores",
            )
    if cfg.kind is ExperimentKind.TRAIN:
        for i, size in enumerate(cfg.train.batch_sweep):  # type: ignore[union-attr]
            if size < 1 or size % cfg.topology.cores:
                raise ConfigError(
                    f"train.batch_sweep[{i}]",
                    f"{size} is not a positive multiple of {cfg.topology.cores} cores",
                )
    if cfg.kind is ExperimentKind.OPTIMIZER_COMPARE:
        known = preset_names()
        for i, name in enumerate(cfg.optimizer_compare.presets):  # type: ignore[union-attr]
            if name not in known:
                raise ConfigError(f"optimizer_compare.presets[{i}]", f"unknown preset {name!r}; known: {known}")
    if cfg.kind in (ExperimentKind.TRAIN, ExperimentKind.OPTIMIZER_COMPARE):
        batches = getattr(cfg.section(), "batch_sweep", ()) or (cfg.batch.global_batch,)  # type: ignore[union-attr]
        _validate_task(cfg.section().task, f"{cfg.kind.value}.task", batches)
    if cfg.kind is ExperimentKind.SHARD_EQUIV:
        _validate_shard_equiv(cfg.shard_equiv)  # type: ignore[arg-type]
    if cfg.kind is ExperimentKind.PIPELINE_STUDY:
        _validate_pipeline_study(cfg.pipeline_study)  # type: ignore[arg-type]
    if cfg.optimizer is not None:
        spec = cfg.optimizer
        chosen = [spec.preset is not None, spec.lars is not None, spec.adam is not None]
        if sum(chosen) != 1:
            raise ConfigError("optimizer", "give exactly one of preset, lars or adam")
        if spec.preset is not None and spec.preset not in preset_names():
            raise ConfigError("optimizer.preset", f"unknown preset {spec.preset!r}; known: {preset_names()}")


def parse_config(data: Dict[str, Any]) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    if "version" not in data:
        raise ConfigError("version", "required field is missing")
    data = dict(data)
    if isinstance(data.get("batch"), dict):
        batch = data["batch"]
        for key in batch:
            if key not in _BATCH_KEYS:
                raise ConfigError(f"batch.{key}", "unknown field")
        data["batch"] = {_BATCH_KEYS[k]: v for k, v in batch.items()}
    cfg = _build(ExperimentConfig, data, "")
    _validate(cfg)
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    """JSON-ready dict; ``parse_config(config_to_dict(c)) == c``."""

    plain = _to_plain(cfg)
    if plain["batch"] is not None:
        reverse = {v: k for k, v in _BATCH_KEYS.items()}
        plain["batch"] = {reverse[k]: v for k, v in plain["batch"].items()}
    return plain


def load_config(path: Path) -> ExperimentConfig:
    if not path.exists():
        raise FileNotFoundError(f"Config not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    logger.info("Read config %s", path)
    return parse_config(data)

