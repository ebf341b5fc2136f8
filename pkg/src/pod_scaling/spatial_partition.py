"""Spatial partitioning of NHWC convolutions with halo exchange, and
distributed batch normalization over a group of cores.

A plan splits the batch into ``batch_splits`` groups and the spatial extents
over a ``grid_h x grid_w`` grid of cores. Each core owns a block of input
rows/columns; before the convolution it receives ``floor(K/2)`` halo
rows/columns from each interior neighbour (SAME, stride 1), while sides that
coincide with the global tensor boundary are zero padded the way SAME
padding pads the monolithic tensor. The local VALID convolution of the
padded block then yields exactly the core's slice of the monolithic output.

An axis whose extent is smaller than its grid extent (the 1x1 tail of a
detection backbone) cannot be split; the planner replicates it instead.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tabulate import tabulate

from .errors import PartitionError, ShapeError
from .tensor_core import (
    BN_EPSILON,
    ConvParams,
    DType,
    Padding,
    Tensor,
    bf16_round,
    conv_output_size,
    conv_window_accumulate,
    normalize_array,
    same_padding,
    snap_variance,
)
from .torus_sim import LinkCostParams, ring_all_reduce_arrays

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ShardSpec:
    grid_h: int
    grid_w: int
    batch_splits: int = 1
    core_ids: Optional[Tuple[int, ...]] = None

    def __post_init__(self) -> None:
        if self.grid_h < 1 or self.grid_w < 1 or self.batch_splits < 1:
            raise PartitionError(
                f"grid {self.grid_h}x{self.grid_w} with {self.batch_splits} batch splits is not positive"
            )
        if self.core_ids is not None:
            ids = tuple(self.core_ids)
            if sorted(ids) != list(range(self.num_cores)):
                raise PartitionError(f"core_ids must be a permutation of 0..{self.num_cores - 1}, got {ids}")
            object.__setattr__(self, "core_ids", ids)

    @property
    def num_cores(self) -> int:
        return self.grid_h * self.grid_w * self.batch_splits

    @property
    def spatial_cores(self) -> int:
        return self.grid_h * self.grid_w

    def core_at(self, batch: int, row: int, col: int) -> int:
        cell = (batch * self.grid_h + row) * self.grid_w + col
        return self.core_ids[cell] if self.core_ids is not None else cell


@dataclass(frozen=True)
class HaloSpec:
    top: int = 0
    bottom: int = 0
    left: int = 0
    right: int = 0

    @property
    def is_zero(self) -> bool:
        return not (self.top or self.bottom or self.left or self.right)


@dataclass(frozen=True)
class AxisSlice:
    lo: int
    hi: int
    halo_before: int
    halo_after: int
    pad_before: int
    pad_after: int
    out_lo: int
    out_hi: int


@dataclass(frozen=True)
class CoreSlice:
    core: int
    position: Tuple[int, int, int]
    batch: Tuple[int, int]
    rows: AxisSlice
    cols: AxisSlice

    @property
    def halo(self) -> HaloSpec:
        return HaloSpec(self.rows.halo_before, self.rows.halo_after, self.cols.halo_before, self.cols.halo_after)

    @property
    def padding(self) -> HaloSpec:
        return HaloSpec(self.rows.pad_before, self.rows.pad_after, self.cols.pad_before, self.cols.pad_after)


@dataclass(frozen=True)
class PartitionPlan:
    input_shape: Tuple[int, int, int, int]
    params: ConvParams
    spec: ShardSpec
    cores: Tuple[CoreSlice, ...]
    replicated_rows: bool = False
    replicated_cols: bool = False

    @property
    def replicated(self) -> bool:
        return self.replicated_rows or self.replicated_cols

    @property
    def output_shape(self) -> Tuple[int, int, int, int]:
        n, h, w, _ = self.input_shape
        k, s, pad = self.params.kernel_size, self.params.stride, self.params.padding
        return (n, conv_output_size(h, k, s, pad), conv_output_size(w, k, s, pad), self.params.out_channels)

    def slice_for(self, core: int) -> CoreSlice:
        for entry in self.cores:
            if entry.core == core:
                return entry
        raise ValueError(f"core {core} is not part of this plan")


def _plan_axis(
    extent: int,
    parts: int,
    params: ConvParams,
    axis: str,
) -> Tuple[List[AxisSlice], bool]:
    k, s, padding = params.kernel_size, params.stride, params.padding
    out_total = conv_output_size(extent, k, s, padding)
    if padding is Padding.SAME:
        pad_before, pad_after = same_padding(extent, k, s)
    else:
        pad_before = pad_after = 0

    whole = AxisSlice(0, extent, 0, 0, pad_before, pad_after, 0, out_total)
    if parts == 1:
        return [whole], False
    if extent < parts:
        logger.debug("%s extent %d < %d cores: replicating", axis, extent, parts)
        return [whole] * parts, True
    if extent % parts:
        raise PartitionError(f"{axis} extent {extent} is not divisible by {parts} cores", axis=axis)
    block = extent // parts
    if s > 1 and block % s:
        raise PartitionError(
            f"{axis} shards of {block} do not align with stride {s} under {padding.value} padding",
            axis=axis,
        )

    slices: List[AxisSlice] = []
    centre = k // 2
    for part in range(parts):
        lo, hi = part * block, (part + 1) * block
        if padding is Padding.SAME:
            out_lo, out_hi = lo // s, hi // s
            start = out_lo * s - pad_before
        else:
            # an output belongs to the shard holding its window centre
            out_lo = min(max(-(-(lo - centre) // s), 0), out_total)
            out_hi = min(-(-(hi - centre) // s), out_total)
            if out_hi <= out_lo:
                slices.append(AxisSlice(lo, hi, 0, 0, 0, 0, out_lo, out_lo))
                continue
            start = out_lo * s
        end = (out_hi - 1) * s - (pad_before if padding is Padding.SAME else 0) + k
        halo_before = lo - max(start, 0)
        halo_after = max(min(end, extent) - hi, 0)
        if halo_before > block or halo_after > block:
            raise PartitionError(
                f"{axis} halo of {max(halo_before, halo_after)} exceeds the {block}-wide shard", axis=axis
            )
        slices.append(
            AxisSlice(
                lo=lo,
                hi=hi,
                halo_before=halo_before,
                halo_after=halo_after,
                pad_before=max(-start, 0),
                pad_after=max(end - extent, 0),
                out_lo=out_lo,
                out_hi=out_hi,
            )
        )
    return slices, False


def plan_partition(input_shape: Sequence[int], params: ConvParams, grid: ShardSpec) -> PartitionPlan:
    """Assign every core its input slice, halo widths and output slice."""

    if len(input_shape) != 4:
        raise ShapeError(f"input shape must be NHWC, got {tuple(input_shape)}")
    n, h, w, c = (int(v) for v in input_shape)
    if c != params.in_channels:
        raise ShapeError(f"input channels {c} do not match params.in_channels {params.in_channels}")
    if n % grid.batch_splits:
        raise PartitionError(f"batch {n} is not divisible by {grid.batch_splits} batch splits", axis="batch")
    row_slices, rep_rows = _plan_axis(h, grid.grid_h, params, "height")
    col_slices, rep_cols = _plan_axis(w, grid.grid_w, params, "width")
    per_batch = n // grid.batch_splits

    cores: List[CoreSlice] = []
    for b in range(grid.batch_splits):
        for i in range(grid.grid_h):
            for j in range(grid.grid_w):
                cores.append(
                    CoreSlice(
                        core=grid.core_at(b, i, j),
                        position=(b, i, j),
                        batch=(b * per_batch, (b + 1) * per_batch),
                        rows=row_slices[i],
                        cols=col_slices[j],
                    )
                )
    return PartitionPlan(
        input_shape=(n, h, w, c),
        params=params,
        spec=grid,
        cores=tuple(cores),
        replicated_rows=rep_rows,
        replicated_cols=rep_cols,
    )


def split_input(full: Tensor, plan: PartitionPlan) -> List[Tensor]:
    """Per-core input shards, indexed by core id."""

    if full.shape != plan.input_shape:
        raise ShapeError(f"input shape {full.shape} does not match plan {plan.input_shape}")
    shards: List[Optional[Tensor]] = [None] * plan.spec.num_cores
    for entry in plan.cores:
        block = full.data[
            entry.batch[0]:entry.batch[1],
            entry.rows.lo:entry.rows.hi,
            entry.cols.lo:entry.cols.hi,
            :,
        ]
        shards[entry.core] = Tensor(data=block, dtype=full.dtype)
    return shards  # type: ignore[return-value]


def _zeros_like_rows(block: np.ndarray, count: int) -> np.ndarray:
    return np.zeros((block.shape[0], count, block.shape[2], block.shape[3]), dtype=block.dtype)


def _zeros_like_cols(block: np.ndarray, count: int) -> np.ndarray:
    return np.zeros((block.shape[0], block.shape[1], count, block.shape[3]), dtype=block.dtype)


def halo_exchange(shards: Sequence[Tensor], plan: PartitionPlan) -> List[Tensor]:
    """Extend every shard with its neighbours' boundary rows and columns.

    Rows travel first; columns are then taken from the row-extended
    neighbours, which carries the corner elements diagonal neighbours need.
    Global-boundary sides get zero padding under SAME and nothing under VALID.
    """

    spec = plan.spec
    if len(shards) != spec.num_cores:
        raise ShapeError(f"{len(shards)} shards for a plan of {spec.num_cores} cores")
    for entry in plan.cores:
        expected = (
            entry.batch[1] - entry.batch[0],
            entry.rows.hi - entry.rows.lo,
            entry.cols.hi - entry.cols.lo,
            plan.input_shape[3],
        )
        if shards[entry.core].shape != expected:
            raise ShapeError(f"core {entry.core} shard {shards[entry.core].shape} does not match plan {expected}")

    by_position: Dict[Tuple[int, int, int], CoreSlice] = {e.position: e for e in plan.cores}
    row_extended: Dict[int, np.ndarray] = {}
    for entry in plan.cores:
        b, i, j = entry.position
        own = shards[entry.core].data
        parts = []
        if entry.rows.pad_before:
            parts.append(_zeros_like_rows(own, entry.rows.pad_before))
        if entry.rows.halo_before:
            above = shards[by_position[(b, i - 1, j)].core].data
            parts.append(above[:, above.shape[1] - entry.rows.halo_before:, :, :])
        parts.append(own)
        if entry.rows.halo_after:
            below = shards[by_position[(b, i + 1, j)].core].data
            parts.append(below[:, :entry.rows.halo_after, :, :])
        if entry.rows.pad_after:
            parts.append(_zeros_like_rows(own, entry.rows.pad_after))
        row_extended[entry.core] = np.concatenate(parts, axis=1)

    exchanged: List[Optional[Tensor]] = [None] * spec.num_cores
    for entry in plan.cores:
        b, i, j = entry.position
        own = row_extended[entry.core]
        parts = []
        if entry.cols.pad_before:
            parts.append(_zeros_like_cols(own, entry.cols.pad_before))
        if entry.cols.halo_before:
            left = row_extended[by_position[(b, i, j - 1)].core]
            parts.append(left[:, :, left.shape[2] - entry.cols.halo_before:, :])
        parts.append(own)
        if entry.cols.halo_after:
            right = row_extended[by_position[(b, i, j + 1)].core]
            parts.append(right[:, :, :entry.cols.halo_after, :])
        if entry.cols.pad_after:
            parts.append(_zeros_like_cols(own, entry.cols.pad_after))
        exchanged[entry.core] = Tensor(data=np.concatenate(parts, axis=2), dtype=shards[entry.core].dtype)
    return exchanged  # type: ignore[return-value]


def sharded_conv2d(shards: Sequence[Tensor], kernel: Tensor, params: ConvParams, plan: PartitionPlan) -> List[Tensor]:
    """Per-core output shards of a spatially partitioned conv2d."""

    if params != plan.params:
        raise ValueError("conv params differ from the ones the plan was built for")
    exchanged = halo_exchange(shards, plan)
    use_bf16 = kernel.dtype is DType.BF16 or any(t.dtype is DType.BF16 for t in shards)
    weights = bf16_round(kernel.data) if use_bf16 else kernel.data
    outputs: List[Optional[Tensor]] = [None] * plan.spec.num_cores
    for entry in plan.cores:
        block = exchanged[entry.core].data
        if use_bf16:
            block = bf16_round(block)
        out = conv_window_accumulate(
            block,
            weights,
            params.stride,
            entry.rows.out_hi - entry.rows.out_lo,
            entry.cols.out_hi - entry.cols.out_lo,
        )
        outputs[entry.core] = Tensor(data=out)
    return outputs  # type: ignore[return-value]


def assemble_output(shards: Sequence[Tensor], plan: PartitionPlan) -> Tensor:
    """Concatenate output shards back into the monolithic output tensor."""

    full = np.zeros(plan.output_shape, dtype=np.float32)
    placed = set()
    for entry in plan.cores:
        region = (entry.batch, (entry.rows.out_lo, entry.rows.out_hi), (entry.cols.out_lo, entry.cols.out_hi))
        if region in placed:
            continue
        placed.add(region)
        full[
            entry.batch[0]:entry.batch[1],
            entry.rows.out_lo:entry.rows.out_hi,
            entry.cols.out_lo:entry.cols.out_hi,
            :,
        ] = shards[entry.core].data
    return Tensor(data=full)


def format_plan(plan: PartitionPlan) -> str:
    rows = []
    for entry in sorted(plan.cores, key=lambda e: e.core):
        halo, pad = entry.halo, entry.padding
        rows.append(
            [
                entry.core,
                f"{entry.batch[0]}:{entry.batch[1]}",
                f"{entry.rows.lo}:{entry.rows.hi}",
                f"{entry.cols.lo}:{entry.cols.hi}",
                f"{halo.top}/{halo.bottom}/{halo.left}/{halo.right}",
                f"{pad.top}/{pad.bottom}/{pad.left}/{pad.right}",
                f"{entry.rows.out_lo}:{entry.rows.out_hi}",
                f"{entry.cols.out_lo}:{entry.cols.out_hi}",
                "yes" if plan.replicated else "no",
            ]
        )
    headers = ["core", "batch", "rows", "cols", "halo t/b/l/r", "pad t/b/l/r", "out rows", "out cols", "replicated"]
    return tabulate(rows, headers=headers, tablefmt="github")


# ---------------------------------------------------------------------------
# Distributed batch normalization
# ---------------------------------------------------------------------------


def all_reduce_group(values: Sequence[Optional[np.ndarray]], group: Sequence[int]) -> np.ndarray:
    """Sum arrays held by ``group`` (indexed by core id); every member gets the same bytes."""

    reduced = ring_all_reduce_arrays(values, list(group))
    return reduced[group[0]]


def distributed_moments(shards: Sequence[Optional[np.ndarray]], group: Sequence[int]) -> Tuple[np.ndarray, np.ndarray, int]:
    """Merged mean and biased variance (float64) of the rows held by ``group``.

    Two all-reduces: (sum, count) gives the global mean, then each core
    contributes its sum of squares centred on that mean.
    """

    if not group:
        raise ValueError("distributed batch norm needs a non-empty core group")
    partials: List[Optional[np.ndarray]] = [None] * len(shards)
    local64: Dict[int, np.ndarray] = {}
    features = None
    for core in group:
        local = shards[core]
        if local is None or local.shape[0] == 0:
            raise ValueError(f"core {core} has an empty local batch")
        if local.ndim != 2:
            raise ShapeError(f"core {core} batch must be [N,F], got shape {local.shape}")
        if features is None:
            features = local.shape[1]
        elif local.shape[1] != features:
            raise ShapeError(f"core {core} has {local.shape[1]} features, expected {features}")
        local64[core] = local.astype(np.float64)
        partials[core] = np.concatenate([local64[core].sum(axis=0), [float(local.shape[0])]])
    merged = all_reduce_group(partials, group)
    count = int(merged[-1])
    mean = merged[:features] / count
    centred: List[Optional[np.ndarray]] = [None] * len(shards)
    for core in group:
        centred[core] = np.square(local64[core] - mean).sum(axis=0)
    var = all_reduce_group(centred, group) / count
    return mean, snap_variance(var, mean, count), count


def distributed_batch_norm(
    shards: Sequence[Optional[Tensor]],
    group: Sequence[int],
    eps: float = BN_EPSILON,
) -> List[Optional[Tensor]]:
    """Normalize each core's [N,F] batch with statistics merged across ``group``."""

    arrays = [s.data if s is not None else None for s in shards]
    mean, var, count = distributed_moments(arrays, group)
    logger.debug("distributed BN over %d cores, %d rows", len(group), count)
    out: List[Optional[Tensor]] = [None] * len(shards)
    for core in group:
        out[core] = Tensor(data=normalize_array(arrays[core], mean, var, eps))
    return out


# ---------------------------------------------------------------------------
# Load and speedup estimates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImbalanceReport:
    per_core: Tuple[float, ...]
    max_over_mean: float


def load_imbalance_report(plan: PartitionPlan, unsharded_op_fraction: float) -> ImbalanceReport:
    """Relative work per core when a fraction of the ops runs unsharded on spatial worker 0."""

    if not 0.0 <= unsharded_op_fraction <= 1.0:
        raise ValueError(f"unsharded_op_fraction must lie in [0, 1], got {unsharded_op_fraction}")
    _, out_h, out_w, _ = plan.output_shape
    group_outputs = max(out_h * out_w, 1)
    work = [0.0] * plan.spec.num_cores
    for entry in plan.cores:
        share = (entry.rows.out_hi - entry.rows.out_lo) * (entry.cols.out_hi - entry.cols.out_lo) / group_outputs
        work[entry.core] = (1.0 - unsharded_op_fraction) * share
        if entry.position[1:] == (0, 0):
            work[entry.core] += unsharded_op_fraction
    mean = sum(work) / len(work)
    ratio = max(work) / mean if mean > 0 else 1.0
    return ImbalanceReport(per_core=tuple(work), max_over_mean=ratio)


@dataclass(frozen=True)
class ConvLayer:
    name: str
    height: int
    width: int
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1


@dataclass(frozen=True)
class LayerEstimate:
    name: str
    replicated: bool
    single_core_seconds: float
    partitioned_seconds: float
    halo_seconds: float
    norm_seconds: float


@dataclass(frozen=True)
class SpatialSpeedupReport:
    layers: Tuple[LayerEstimate, ...] = field(default_factory=tuple)
    speedup: float = 1.0


def ssd_like_layers(input_extent: int = 64, channels: int = 32) -> List[ConvLayer]:
    """A detection-style stack whose spatial extent halves down to 1x1 while channels grow."""

    layers: List[ConvLayer] = []
    extent, cin = input_extent, 3
    index = 0
    while extent >= 1:
        cout = min(channels * 2 ** index, 512)
        layers.append(ConvLayer(f"conv{index}", extent, extent, cin, cout, kernel_size=3))
        cin = cout
        index += 1
        if extent == 1:
            break
        extent //= 2
    return layers


def estimate_spatial_speedup(
    layers: Sequence[ConvLayer],
    grid: ShardSpec,
    cost: LinkCostParams,
    unsharded_op_fraction: float = 0.0,
    flops_per_second: float = 1e12,
    batch: int = 1,
    bytes_per_element: int = 2,
) -> SpatialSpeedupReport:
    """Analytic step-time speedup of spatial partitioning over a single core.

    Compute is split by each core's output share (replicated layers are not
    split), worker 0 also runs the unsharded fraction, and every layer pays
    its halo exchange plus the all-reduce of distributed BN statistics.
    """

    estimates: List[LayerEstimate] = []
    single_total = 0.0
    partitioned_total = 0.0
    spatial = ShardSpec(grid.grid_h, grid.grid_w)
    for layer in layers:
        params = ConvParams(layer.kernel_size, layer.in_channels, layer.out_channels, stride=layer.stride)
        plan = plan_partition((batch, layer.height, layer.width, layer.in_channels), params, spatial)
        _, out_h, out_w, _ = plan.output_shape
        flops = 2.0 * batch * out_h * out_w * layer.kernel_size ** 2 * layer.in_channels * layer.out_channels
        single = flops / flops_per_second
        report = load_imbalance_report(plan, unsharded_op_fraction)
        compute = max(report.per_core) * single
        halo_elements = max(
            (e.halo.top + e.halo.bottom) * (e.cols.hi - e.cols.lo) + (e.halo.left + e.halo.right) * (e.rows.hi - e.rows.lo + e.halo.top + e.halo.bottom)
            for e in plan.cores
        )
        halo = 0.0
        if halo_elements:
            halo = halo_elements * batch * layer.in_channels * bytes_per_element / cost.link_bandwidth + 2 * cost.hop_latency
        n = spatial.num_cores
        norm = 0.0
        if n > 1 and not plan.replicated:
            stat_bytes = (2 * layer.out_channels + 1) * 4
            norm = 2 * (n - 1) * (stat_bytes / n / cost.link_bandwidth + cost.hop_latency)
        estimates.append(LayerEstimate(layer.name, plan.replicated, single, compute, halo, norm))
        single_total += single
        partitioned_total += compute + halo + norm
    speedup = single_total / partitioned_total if partitioned_total > 0 else 1.0
    return SpatialSpeedupReport(layers=tuple(estimates), speedup=speedup)
