"""The five experiment kinds behind ``main.py run``.

Each kind turns a validated ``ExperimentConfig`` into an ``ExperimentResult``
(summary rows, kind-specific tables and JSON-lines metrics). Independent
seeds can fan out over worker processes; results keep submission order, so
the output does not depend on ``jobs``.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from .config import (
    CollectiveSweepSection,
    ExperimentConfig,
    ExperimentKind,
    ModelKind,
    OptimizerCompareSection,
    PipelineStudySection,
    ShardEquivSection,
    TaskConfig,
    TrainSection,
)
from .input_pipeline import (
    BucketizerConfig,
    SequenceExample,
    load_balance_metric,
    pad_sequences,
    padding_fraction,
    random_batches,
    read_sequence_corpus,
    round_robin_distribute,
    split_global_batch,
    synthetic_corpus,
    trim_eval_to_max_real_length,
    window_bucketize,
)
from .models import (
    CostRow,
    EquivalenceRow,
    LoadBalanceRow,
    PipelineSummaryRow,
    PresetRow,
    RunSummary,
)
from .networks import ConvNet, LstmClassifier, Network
from .optimizers import (
    AdamConfig,
    AdamOptimizer,
    LarsConfig,
    LarsOptimizer,
    LarsVariant,
    OptimizerSpec,
    optimizer_step,
    plan_weight_shards,
    resolve_optimizer,
    sharded_weight_update,
)
from .report import (
    build_table,
    metrics_lines,
    monotone_seed_fraction,
    report_batch_epoch_curve,
    write_csv,
    write_jsonl,
)
from .rnn_opt import (
    LstmParams,
    LstmState,
    lstm_backward_deferred,
    lstm_backward_stepwise,
    lstm_forward_hoisted,
    lstm_forward_standard,
)
from .spatial_partition import (
    ShardSpec,
    assemble_output,
    distributed_batch_norm,
    estimate_spatial_speedup,
    plan_partition,
    sharded_conv2d,
    split_input,
    ssd_like_layers,
)
from .tensor_core import ConvParams, DType, Tensor, conv2d, max_deviation, normalize_array
from .torus_sim import (
    GradientSet,
    LinkCostParams,
    TorusTopology,
    all_reduce_2d,
    best_chunk_count,
    summation_stage_times,
    sweep_summation,
    synthetic_gradient_set,
)
from .train_eval_loop import (
    TrainLoopConfig,
    epochs_to_target,
    make_classification_data,
    pad_eval_dataset,
    run_train_and_eval,
    steps_per_epoch,
)

logger = logging.getLogger(__name__)

A = TypeVar("A")
R = TypeVar("R")

DEFAULT_OPTIMIZER = OptimizerSpec(adam=AdamConfig(lr=0.01))


@dataclass
class ExperimentResult:
    kind: ExperimentKind
    summary: List[Any] = field(default_factory=list)
    tables: Dict[str, List[Any]] = field(default_factory=dict)
    metrics: List[Dict[str, Any]] = field(default_factory=list)
    violation: Optional[EquivalenceRow] = None


def _map(fn: Callable[[A], R], items: Sequence[A], jobs: int) -> List[R]:
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def apply_seed_override(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Replace the config seed, and any explicit seed lists, by ``seed``."""

    cfg = replace(cfg, seed=seed)
    if cfg.train is not None and cfg.train.seeds:
        cfg = replace(cfg, train=replace(cfg.train, seeds=(seed,)))
    if cfg.optimizer_compare is not None:
        cfg = replace(cfg, optimizer_compare=replace(cfg.optimizer_compare, seeds=(seed,)))
    return cfg


# ---------------------------------------------------------------------------
# Training runs
# ---------------------------------------------------------------------------


def build_network(task: TaskConfig) -> Network:
    if task.model is ModelKind.CONVNET:
        return ConvNet(task.input_shape, task.channels, task.classes, bf16_conv=task.bf16_conv)
    steps, features = task.input_shape
    return LstmClassifier(steps=steps, features=features, hidden=task.hidden, classes=task.classes)


@dataclass(frozen=True)
class TrainJob:
    label: str
    seed: int
    data_seed: int
    global_batch: int
    task: TaskConfig
    optimizer: OptimizerSpec
    rows: int
    cols: int
    eval_every_epochs: int


def run_training_job(job: TrainJob) -> Tuple[RunSummary, List[Dict[str, Any]]]:
    task = job.task
    topo = TorusTopology(job.rows, job.cols)
    data = make_classification_data(job.data_seed, task.n_train, task.n_eval, task.input_shape, task.classes, task.separation)
    eval_ds = pad_eval_dataset(data.eval_x, data.eval_y, topo.size, task.per_core_eval_batch)
    optimizer = resolve_optimizer(job.optimizer, steps_per_epoch(task.n_train, job.global_batch))
    loop = TrainLoopConfig(
        total_epochs=task.epochs,
        per_core_batch=job.global_batch // topo.size,
        per_core_eval_batch=task.per_core_eval_batch,
        eval_every_epochs=job.eval_every_epochs,
        target_metric=task.target,
        seed=job.seed,
    )
    records = run_train_and_eval(build_network(task), data, eval_ds, optimizer, topo, loop)
    summary = RunSummary(
        label=job.label,
        seed=job.seed,
        global_batch=job.global_batch,
        epochs_to_target=epochs_to_target(records, task.target) if task.target is not None else None,
        final_metric=records[-1].eval_metric,
        steps=records[-1].wall_steps,
    )
    return summary, metrics_lines(job.label, job.seed, job.global_batch, records)


def _run_train(cfg: ExperimentConfig, section: TrainSection, jobs: int) -> ExperimentResult:
    assert cfg.batch is not None
    spec = cfg.optimizer or DEFAULT_OPTIMIZER
    batches = section.batch_sweep or (cfg.batch.global_batch,)
    seeds = section.seeds or (cfg.seed,)
    work = [
        TrainJob(spec.label(), seed, cfg.seed, batch, section.task, spec, cfg.topology.rows, cfg.topology.cols, cfg.eval_every_epochs)
        for batch in batches
        for seed in seeds
    ]
    outcomes = _map(run_training_job, work, jobs)
    result = ExperimentResult(kind=cfg.kind, summary=[s for s, _ in outcomes])
    for _, lines in outcomes:
        result.metrics.extend(lines)
    if len(batches) >= 2 and section.task.target is not None:
        result.tables["batch_epoch_curve.csv"] = report_batch_epoch_curve(result.summary)
        logger.info("epochs-to-target nondecreasing for %.0f%% of seeds", 100 * monotone_seed_fraction(result.summary))
    return result


def _run_optimizer_compare(cfg: ExperimentConfig, section: OptimizerCompareSection, jobs: int) -> ExperimentResult:
    assert cfg.batch is not None
    work = [
        TrainJob(
            preset,
            seed,
            cfg.seed,
            cfg.batch.global_batch,
            section.task,
            OptimizerSpec(preset=preset, schedule_scale=section.schedule_scale),
            cfg.topology.rows,
            cfg.topology.cols,
            cfg.eval_every_epochs,
        )
        for preset in section.presets
        for seed in section.seeds
    ]
    outcomes = _map(run_training_job, work, jobs)
    result = ExperimentResult(kind=cfg.kind, summary=[s for s, _ in outcomes])
    for _, lines in outcomes:
        result.metrics.extend(lines)
    rows: List[PresetRow] = []
    for preset in section.presets:
        runs = [s for s in result.summary if s.label == preset]
        reached = [s.epochs_to_target for s in runs if s.epochs_to_target is not None]
        rows.append(
            PresetRow(
                preset=preset,
                runs=len(runs),
                runs_reaching_target=len(reached),
                mean_epochs_to_target=sum(reached) / len(reached) if reached else None,
                mean_final_metric=sum(s.final_metric for s in runs) / len(runs),
            )
        )
        if not reached and section.task.target is not None:
            logger.warning("preset %s never reached target %.3f", preset, section.task.target)
    result.tables["optimizer_compare.csv"] = rows
    return result


# ---------------------------------------------------------------------------
# Equivalence suite
# ---------------------------------------------------------------------------


def _relative(actual: np.ndarray, expected: np.ndarray) -> float:
    scale = float(np.max(np.abs(expected))) if expected.size else 0.0
    diff = float(np.max(np.abs(actual.astype(np.float64) - expected))) if expected.size else 0.0
    return diff / scale if scale > 0 else diff


def _worst(check: str, case: str, deviations: List[Tuple[float, Tuple[int, ...]]], tolerance: float = 0.0) -> EquivalenceRow:
    value, location = max(deviations, key=lambda d: d[0])
    return EquivalenceRow(check=check, case=case, max_deviation=value, tolerance=tolerance, location=tuple(location))


def _conv_rows(section: ShardEquivSection, rng: np.random.Generator) -> List[EquivalenceRow]:
    rows: List[EquivalenceRow] = []
    shape = (section.batch, section.extent, section.extent, section.in_channels)
    for k in section.kernel_sizes:
        params = ConvParams(k, section.in_channels, section.out_channels)
        for grid_h, grid_w in section.grids:
            plan = plan_partition(shape, params, ShardSpec(grid_h, grid_w))
            for dtype in (DType.F32, DType.BF16):
                deviations = []
                for _ in range(section.cases):
                    x = Tensor(data=rng.normal(size=shape), dtype=dtype)
                    kernel = Tensor(data=rng.normal(size=(k, k, section.in_channels, section.out_channels)), dtype=dtype)
                    sharded = assemble_output(sharded_conv2d(split_input(x, plan), kernel, params, plan), plan)
                    deviations.append(max_deviation(sharded.data, conv2d(x, kernel, params).data))
                rows.append(_worst("sharded_conv2d", f"K={k} grid {grid_h}x{grid_w} {dtype.value}", deviations))
    return rows


def _batch_norm_rows(section: ShardEquivSection, rng: np.random.Generator) -> List[EquivalenceRow]:
    rows: List[EquivalenceRow] = []
    for cores in (1, 2, 4, 8):
        deviations = []
        for _ in range(section.cases):
            shards = [Tensor(data=rng.normal(1.0, 2.0, size=(int(rng.integers(1, 9)), section.out_channels))) for _ in range(cores)]
            normalized = distributed_batch_norm(shards, list(range(cores)))
            full = np.concatenate([s.data for s in shards]).astype(np.float64)
            expected = normalize_array(full, full.mean(axis=0), full.var(axis=0))
            actual = np.concatenate([t.data for t in normalized])  # type: ignore[union-attr]
            deviations.append(max_deviation(actual, expected))
        rows.append(_worst("distributed_batch_norm", f"{cores} cores", deviations, tolerance=1e-6))
    return rows


def _all_reduce_rows(section: ShardEquivSection, rng: np.random.Generator) -> List[EquivalenceRow]:
    rows: List[EquivalenceRow] = []
    for rows_, cols in ((1, 2), (2, 2), (4, 4), (8, 8)):
        topo = TorusTopology(rows_, cols)
        for integer in (True, False):
            deviations = []
            for _ in range(max(1, section.cases // 4)):
                if integer:
                    arrays = [rng.integers(-100, 100, size=13).astype(np.float64) for _ in range(topo.size)]
                else:
                    arrays = [rng.normal(size=13) for _ in range(topo.size)]
                sets = [GradientSet.from_arrays({"g": a}) for a in arrays]
                reduced = all_reduce_2d(sets, topo)
                expected = np.sum([s["g"].data.astype(np.float64) for s in sets], axis=0)
                for core in range(topo.size):
                    if integer:
                        deviations.append(max_deviation(reduced[core]["g"].data, expected))
                    else:
                        deviations.append((_relative(reduced[core]["g"].data, expected), ()))
            label = "integer" if integer else "f32 relative"
            rows.append(_worst("all_reduce_2d", f"{rows_}x{cols} {label}", deviations, 0.0 if integer else 1e-5))
    return rows


def _weight_update_rows(section: ShardEquivSection, rng: np.random.Generator) -> List[EquivalenceRow]:
    shapes = {"conv/kernel": (3, 3, 2, 4), "bn/gamma": (4,), "bn/beta": (4,), "dense/kernel": (16, 4), "dense/bias": (4,)}
    optimizers = [
        LarsOptimizer(LarsConfig(base_lr=2.0, warmup_epochs=2.0, total_epochs=10.0, variant=LarsVariant.SCALED), 10),
        LarsOptimizer(LarsConfig(base_lr=2.0, warmup_epochs=2.0, total_epochs=10.0, variant=LarsVariant.UNSCALED), 10),
        AdamOptimizer(AdamConfig(lr=0.01)),
    ]
    rows: List[EquivalenceRow] = []
    for optimizer in optimizers:
        for cores in section.shard_counts:
            topo = TorusTopology(1, cores)
            weights = GradientSet.from_arrays({n: rng.normal(size=s) for n, s in shapes.items()})
            layout = plan_weight_shards(weights, cores)
            replicated, sharded = weights, weights
            rep_state = optimizer.init_state(weights)
            shard_state = optimizer.init_state(weights)
            deviations = []
            for _ in range(section.optimizer_steps):
                grads = GradientSet.from_arrays({n: rng.normal(size=s) for n, s in shapes.items()})
                replicated, rep_state = optimizer_step(optimizer, replicated, grads, rep_state)
                per_core, shard_state = sharded_weight_update([grads] * cores, sharded, shard_state, layout, optimizer, topo)
                sharded = per_core[0]
                for copy in per_core:
                    deviations.append(max_deviation(copy.flatten(), replicated.flatten()))
            rows.append(_worst("sharded_weight_update", f"{optimizer.name} {cores} shards", deviations))
    return rows


def _lstm_rows(section: ShardEquivSection, rng: np.random.Generator) -> List[EquivalenceRow]:
    forward: List[Tuple[float, Tuple[int, ...]]] = []
    backward: List[Tuple[float, Tuple[int, ...]]] = []
    for case in range(section.lstm_cases):
        steps, batch, features, hidden = int(rng.integers(1, 6)), 2, 3, 4
        params = LstmParams.random(rng, features, hidden)
        x = Tensor(data=rng.normal(size=(steps, batch, features)))
        init = LstmState(h=Tensor(data=rng.normal(size=(batch, hidden))), c=Tensor(data=rng.normal(size=(batch, hidden))))
        standard = lstm_forward_standard(x, params, init)
        hoisted = lstm_forward_hoisted(x, params, init)
        forward.append(max_deviation(hoisted.h_seq, standard.h_seq))
        upstream = rng.normal(size=(steps, batch, hidden)).astype(np.float32)
        deferred = lstm_backward_deferred(params, hoisted, upstream)
        stepwise = lstm_backward_stepwise(params, hoisted, upstream)
        backward.append((max(_relative(getattr(deferred, n), getattr(stepwise, n).astype(np.float64)) for n in ("w_x", "w_h", "bias")), (case,)))
    return [
        _worst("lstm_forward_hoisted", f"{section.lstm_cases} cases", forward),
        _worst("lstm_backward_deferred", f"{section.lstm_cases} cases relative", backward, 1e-5),
    ]


def _run_shard_equiv(cfg: ExperimentConfig, section: ShardEquivSection) -> ExperimentResult:
    rng = np.random.default_rng(cfg.seed)
    rows = (
        _conv_rows(section, rng)
        + _batch_norm_rows(section, rng)
        + _all_reduce_rows(section, rng)
        + _weight_update_rows(section, rng)
        + _lstm_rows(section, rng)
    )
    for row in rows:
        logger.info("%s %s: max deviation %r", row.check, row.case, row.max_deviation)
    grid = ShardSpec(cfg.topology.rows, cfg.topology.cols)
    speedup = estimate_spatial_speedup(ssd_like_layers(), grid, LinkCostParams(), section.unsharded_op_fraction)
    logger.info("Spatial partitioning on %dx%d: estimated speedup %.3f", grid.grid_h, grid.grid_w, speedup.speedup)
    result = ExperimentResult(kind=cfg.kind, summary=rows)
    result.tables["shard_equiv.csv"] = rows
    result.tables["spatial_speedup.csv"] = list(speedup.layers)
    result.violation = next((row for row in rows if not row.passed), None)
    return result


# ---------------------------------------------------------------------------
# Cost-model sweep
# ---------------------------------------------------------------------------


def _run_collective_sweep(cfg: ExperimentConfig, section: CollectiveSweepSection) -> ExperimentResult:
    rows: List[CostRow] = []
    for rows_, cols in section.topologies:
        topo = TorusTopology(rows_, cols)
        for nbytes in section.byte_sizes:
            grads = synthetic_gradient_set([nbytes])
            stages = summation_stage_times(grads.total_bytes, topo, section.cost)
            chunk_counts = list(section.chunk_counts)
            best = best_chunk_count(stages, section.cost.chunk_overhead)
            if best not in chunk_counts:
                chunk_counts.append(best)
            scenario = f"{nbytes}B"
            rows.extend(sweep_summation(scenario, grads, topo, section.cost, chunk_counts))
            logger.debug(
                "%s on %dx%d: gather %.3g s, network %.3g s, scatter %.3g s, best chunks %d",
                scenario, rows_, cols, stages.gather, stages.network, stages.scatter, best,
            )
    peak = max(rows, key=lambda r: r.speedup)
    logger.info("Best pipelined speedup %.3fx (%s, %s, %d chunks)", peak.speedup, peak.topology, peak.scenario, peak.chunks)
    result = ExperimentResult(kind=cfg.kind, summary=rows)
    result.tables["collective_sweep.csv"] = rows
    return result


# ---------------------------------------------------------------------------
# Input pipeline study
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineJob:
    seed: int
    section: PipelineStudySection
    corpus: Tuple[SequenceExample, ...] = ()


def _split_steps(batches, workers: int):
    return [split_global_batch(batch, workers) for batch in batches]


def run_pipeline_seed(job: PipelineJob) -> LoadBalanceRow:
    section = job.section
    rng = np.random.default_rng(job.seed)
    if job.corpus:
        corpus = [job.corpus[i] for i in rng.permutation(len(job.corpus))]
    else:
        corpus = synthetic_corpus(rng, section.corpus_size, section.min_length, section.max_length)
    global_batch = section.per_worker_batch * section.workers
    bucketized = _split_steps(
        window_bucketize(corpus, BucketizerConfig(section.window, global_batch, drop_partial=True)),
        section.workers,
    )
    shuffled = _split_steps(random_batches(corpus, global_batch, rng, drop_partial=True), section.workers)
    return LoadBalanceRow(
        seed=job.seed,
        bucketized_ratio=load_balance_metric(bucketized),
        random_ratio=load_balance_metric(shuffled),
        bucketized_padding=padding_fraction([b for step in bucketized for b in step]),
        random_padding=padding_fraction([b for step in shuffled for b in step]),
    )


def _run_pipeline_study(cfg: ExperimentConfig, section: PipelineStudySection, jobs: int) -> ExperimentResult:
    corpus: Tuple[SequenceExample, ...] = ()
    if section.corpus is not None:
        corpus = tuple(read_sequence_corpus(Path(section.corpus)))
    work = [PipelineJob(cfg.seed + i, section, corpus) for i in range(section.seeds)]
    rows = _map(run_pipeline_seed, work, jobs)

    rng = np.random.default_rng(cfg.seed)
    eval_set = list(corpus) or synthetic_corpus(rng, section.corpus_size, section.min_length, section.max_length)
    trimmed = trim_eval_to_max_real_length(pad_sequences(eval_set, section.eval_padded_len))
    global_batch = section.per_worker_batch * section.workers
    batches = window_bucketize(eval_set, BucketizerConfig(section.window, global_batch))
    hosts = round_robin_distribute(batches, section.hosts)

    summary = PipelineSummaryRow(
        seeds=len(rows),
        bucketized_not_worse=sum(r.bucketized_ratio <= r.random_ratio for r in rows) / len(rows),
        mean_bucketized_ratio=float(np.mean([r.bucketized_ratio for r in rows])),
        mean_random_ratio=float(np.mean([r.random_ratio for r in rows])),
        eval_padded_len=section.eval_padded_len,
        eval_trimmed_len=trimmed.padded_len,
        host_batch_counts=tuple(len(h) for h in hosts),
    )
    result = ExperimentResult(kind=cfg.kind, summary=[summary])
    result.tables["pipeline_study.csv"] = rows
    return result


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    logger.info("Running %s experiment (seed %d)", cfg.kind.value, cfg.seed)
    section = cfg.section()
    if cfg.kind is ExperimentKind.TRAIN:
        return _run_train(cfg, section, jobs)
    if cfg.kind is ExperimentKind.OPTIMIZER_COMPARE:
        return _run_optimizer_compare(cfg, section, jobs)
    if cfg.kind is ExperimentKind.SHARD_EQUIV:
        return _run_shard_equiv(cfg, section)
    if cfg.kind is ExperimentKind.COLLECTIVE_SWEEP:
        return _run_collective_sweep(cfg, section)
    return _run_pipeline_study(cfg, section, jobs)


def write_reports(result: ExperimentResult, out_dir: Path) -> List[Path]:
    """metrics.jsonl, summary.csv and one CSV per kind-specific table."""

    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / "metrics.jsonl", out_dir / "summary.csv"]
    write_jsonl(written[0], result.metrics)
    write_csv(written[1], result.summary)
    for name, rows in sorted(result.tables.items()):
        path = out_dir / name
        write_csv(path, rows)
        written.append(path)
    return written


def summary_table(result: ExperimentResult) -> str:
    return build_table(result.summary)
