"""Value-level simulation of collectives on a logical 2-D torus, plus the
analytic time model for gradient summation.

Cores are numbered row-major: core ``r * cols + c`` sits at (r, c). Per-core
state is a list indexed by core id. Collectives run as phase-ordered loops
over that list, so one simulation is single threaded and deterministic.

Time model
----------
For a gradient set of ``B`` total bytes on a ``rows x cols`` torus with link
bandwidth ``bw``, per-hop latency ``a``, memory bandwidth ``mem`` and a
per-chunk overhead ``o``::

    T_gather  = B / mem        # gather of non-contiguous tensors from HBM
    T_scatter = B / mem        # scatter of the summed buffer back
    T_net     = 2 (cols-1) (B / cols / bw + a)            # row reduce-scatter + all-gather
              + 2 (rows-1) (B / (rows cols) / bw + a)     # column all-reduce of one shard

    unpipelined = T_gather + T_net + T_scatter
    pipelined   = M + (T_gather + T_net + T_scatter - M) / chunks + chunks * o
                  where M = max(T_gather, T_net, T_scatter)

With one chunk nothing overlaps and the pipelined time is the unpipelined
time plus one chunk overhead. As ``chunks`` grows (with ``o = 0``) it tends to
the slowest stage ``M``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeError
from .models import CostRow
from .tensor_core import Tensor

logger = logging.getLogger(__name__)


class Direction(str, Enum):
    PLUS_ROW = "+row"
    MINUS_ROW = "-row"
    PLUS_COL = "+col"
    MINUS_COL = "-col"


@dataclass(frozen=True)
class TorusTopology:
    rows: int
    cols: int

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"torus extents must be positive, got {self.rows}x{self.cols}")

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def cores(self) -> List[int]:
        return list(range(self.size))

    def coords(self, core: int) -> Tuple[int, int]:
        self._check_core(core)
        return divmod(core, self.cols)

    def core_at(self, row: int, col: int) -> int:
        return (row % self.rows) * self.cols + (col % self.cols)

    def row_ring(self, row: int) -> List[int]:
        return [self.core_at(row, c) for c in range(self.cols)]

    def col_ring(self, col: int) -> List[int]:
        return [self.core_at(r, col) for r in range(self.rows)]

    def neighbors(self, core: int) -> List[int]:
        """Distinct torus neighbours, self-links excluded."""
        found: List[int] = []
        for direction in Direction:
            other = neighbor(core, direction, self)
            if other != core and other not in found:
                found.append(other)
        return found

    def _check_core(self, core: int) -> None:
        if not 0 <= core < self.size:
            raise ValueError(f"core id {core} outside torus of {self.size} cores")


def neighbor(core: int, direction: Direction, topo: TorusTopology) -> int:
    row, col = topo.coords(core)
    direction = Direction(direction)
    if direction is Direction.PLUS_ROW:
        return topo.core_at(row + 1, col)
    if direction is Direction.MINUS_ROW:
        return topo.core_at(row - 1, col)
    if direction is Direction.PLUS_COL:
        return topo.core_at(row, col + 1)
    return topo.core_at(row, col - 1)


@dataclass(frozen=True)
class LinkCostParams:
    """Analytic link and memory costs.

    The defaults exhibit the pipelining regime: on a 4x4 torus, 100 MB of
    gradients in 8 chunks sums about 1.8x faster pipelined than not.
    """

    link_bandwidth: float = 100e9
    hop_latency: float = 1e-6
    mem_bandwidth: float = 100e9
    chunk_overhead: float = 5e-6

    def __post_init__(self) -> None:
        for name in ("link_bandwidth", "hop_latency", "mem_bandwidth", "chunk_overhead"):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError(f"{name} must be strictly positive, got {value!r}")


@dataclass(frozen=True, eq=False)
class GradientSet:
    """Ordered named tensors; the order is the flattening order on every core."""

    names: Tuple[str, ...]
    tensors: Tuple[Tensor, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "tensors", tuple(self.tensors))
        if len(self.names) != len(self.tensors):
            raise ShapeError(f"{len(self.names)} names for {len(self.tensors)} tensors")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"gradient names must be unique: {self.names}")

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "GradientSet":
        return cls(names=tuple(arrays), tensors=tuple(Tensor(data=a) for a in arrays.values()))

    @property
    def shapes(self) -> Tuple[Tuple[int, ...], ...]:
        return tuple(t.shape for t in self.tensors)

    @property
    def total_elements(self) -> int:
        return sum(t.size for t in self.tensors)

    @property
    def total_bytes(self) -> int:
        return sum(t.nbytes for t in self.tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[self.names.index(name)]

    def as_arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in zip(self.names, self.tensors)}

    def same_structure(self, other: "GradientSet") -> bool:
        return self.names == other.names and self.shapes == other.shapes

    def flatten(self) -> np.ndarray:
        """Gather every tensor into one contiguous float32 buffer."""
        if not self.tensors:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([t.flat for t in self.tensors]).astype(np.float32, copy=False)

    def unflatten(self, flat: np.ndarray) -> "GradientSet":
        """Scatter a flat buffer back into tensors of this set's shapes."""
        if flat.size != self.total_elements:
            raise ShapeError(f"flat buffer has {flat.size} elements, set needs {self.total_elements}")
        tensors: List[Tensor] = []
        offset = 0
        for t in self.tensors:
            tensors.append(Tensor(data=flat[offset:offset + t.size].reshape(t.shape), dtype=t.dtype))
            offset += t.size
        return GradientSet(names=self.names, tensors=tuple(tensors))


# ---------------------------------------------------------------------------
# Ring collectives on flat buffers
# ---------------------------------------------------------------------------


def _shard_bounds(length: int, parts: int) -> List[Tuple[int, int]]:
    base, extra = divmod(length, parts)
    bounds: List[Tuple[int, int]] = []
    start = 0
    for index in range(parts):
        stop = start + base + (1 if index < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


def _check_ring(ring: Sequence[int], values: Sequence[object]) -> None:
    if not ring:
        raise ValueError("ring must contain at least one core")
    if len(set(ring)) != len(ring):
        raise ValueError(f"ring visits a core twice: {list(ring)}")
    for core in ring:
        if not 0 <= core < len(values):
            raise ValueError(f"ring core {core} has no value (have {len(values)} cores)")


def _ring_reduce_scatter_arrays(values: List[np.ndarray], ring: Sequence[int]) -> Dict[int, np.ndarray]:
    shape = values[ring[0]].shape
    for core in ring:
        if values[core].shape != shape:
            raise ShapeError(f"core {core} holds shape {values[core].shape}, core {ring[0]} holds {shape}")
    n = len(ring)
    flat = {core: np.ascontiguousarray(values[core]).reshape(-1) for core in ring}
    bounds = _shard_bounds(flat[ring[0]].size, n)
    # partial[i] is the running sum of chunk i as it travels around the ring;
    # it starts at the position right after the chunk's owner.
    partial: Dict[int, np.ndarray] = {}
    for i in range(n):
        lo, hi = bounds[i]
        partial[i] = flat[ring[(i + 1) % n]][lo:hi].copy()
    for step in range(1, n):
        for i in range(n):
            lo, hi = bounds[i]
            receiver = ring[(i + 1 + step) % n]
            partial[i] = partial[i] + flat[receiver][lo:hi]
    logger.debug("reduce-scatter over ring %s: %d shards", list(ring), n)
    return {ring[i]: partial[i] for i in range(n)}


def _ring_all_gather_arrays(shards: Dict[int, np.ndarray], ring: Sequence[int]) -> Dict[int, np.ndarray]:
    n = len(ring)
    dtype = shards[ring[0]].dtype
    for core in ring:
        if shards[core].ndim != 1 or shards[core].dtype != dtype:
            raise ShapeError(f"core {core} shard must be a flat {dtype} buffer")
    # Each chunk is forwarded n-1 times; every core ends up with the same bytes.
    held: Dict[int, Dict[int, np.ndarray]] = {core: {i: shards[core]} for i, core in enumerate(ring)}
    for step in range(n - 1):
        for i, core in enumerate(ring):
            chunk = (i - step) % n
            receiver = ring[(i + 1) % n]
            held[receiver][chunk] = held[core][chunk]
    return {core: np.concatenate([held[core][i] for i in range(n)]) for core in ring}


def ring_reduce_scatter(values: Sequence[Tensor], ring: Sequence[int]) -> Dict[int, Tensor]:
    """Reduce-scatter along ``ring``: ring position i ends with the full sum of shard i.

    The flattened tensor is split into ``len(ring)`` contiguous shards (the
    first ``size % len(ring)`` shards one element longer). Shard i is summed
    starting at ring position i+1 and moving forward, so its summation order
    is fixed by the ring order.
    """

    _check_ring(ring, values)
    if len(ring) == 1:
        return {ring[0]: values[ring[0]]}
    arrays = [v.data if v is not None else None for v in values]
    shards = _ring_reduce_scatter_arrays(arrays, ring)
    return {core: Tensor(data=shard) for core, shard in shards.items()}


def ring_all_gather(shards: Dict[int, Tensor], ring: Sequence[int]) -> Dict[int, Tensor]:
    """Every core on ``ring`` ends with the concatenation of all shards in ring order."""

    if not ring:
        raise ValueError("ring must contain at least one core")
    missing = [core for core in ring if core not in shards]
    if missing:
        raise ShapeError(f"no shard for ring cores {missing}")
    if len(ring) == 1:
        return {ring[0]: shards[ring[0]]}
    flat = {core: shards[core].flat for core in ring}
    gathered = _ring_all_gather_arrays(flat, ring)
    return {core: Tensor(data=array) for core, array in gathered.items()}


def ring_all_reduce(values: Sequence[Tensor], ring: Sequence[int]) -> Dict[int, Tensor]:
    """Reduce-scatter followed by all-gather; shapes are restored."""

    _check_ring(ring, values)
    shape = values[ring[0]].shape
    if len(ring) == 1:
        return {ring[0]: values[ring[0]]}
    reduced = ring_reduce_scatter(values, ring)
    gathered = ring_all_gather(reduced, ring)
    return {core: Tensor(data=t.data.reshape(shape)) for core, t in gathered.items()}


def ring_all_reduce_arrays(values: Sequence[Optional[np.ndarray]], ring: Sequence[int]) -> Dict[int, np.ndarray]:
    """Ring all-reduce of raw arrays indexed by core id; keeps their dtype."""

    _check_ring(ring, values)
    shape = values[ring[0]].shape  # type: ignore[union-attr]
    if len(ring) == 1:
        return {ring[0]: np.array(values[ring[0]])}
    reduced = _ring_reduce_scatter_arrays(list(values), ring)  # type: ignore[arg-type]
    gathered = _ring_all_gather_arrays(reduced, ring)
    return {core: array.reshape(shape) for core, array in gathered.items()}


def all_reduce_flat(buffers: Sequence[np.ndarray], topo: TorusTopology) -> List[np.ndarray]:
    """2-D all-reduce of one flat float buffer per core.

    Rows reduce-scatter, then each column all-reduces the shard it holds,
    then rows all-gather. Every core receives the same bytes.
    """

    if len(buffers) != topo.size:
        raise ShapeError(f"{len(buffers)} buffers for a torus of {topo.size} cores")
    length = buffers[0].size
    for core, buf in enumerate(buffers):
        if buf.ndim != 1 or buf.size != length:
            raise ShapeError(f"core {core} buffer has shape {buf.shape}, expected ({length},)")
    if topo.size == 1:
        return [buffers[0].copy()]

    values = list(buffers)
    row_shards: Dict[int, np.ndarray] = {}
    for row in range(topo.rows):
        ring = topo.row_ring(row)
        if len(ring) == 1:
            row_shards[ring[0]] = values[ring[0]].copy()
        else:
            row_shards.update(_ring_reduce_scatter_arrays(values, ring))

    column_sums: Dict[int, np.ndarray] = {}
    for col in range(topo.cols):
        ring = topo.col_ring(col)
        if len(ring) == 1:
            column_sums[ring[0]] = row_shards[ring[0]]
            continue
        column_values: List[Optional[np.ndarray]] = [None] * topo.size
        for core in ring:
            column_values[core] = row_shards[core]
        reduced = _ring_reduce_scatter_arrays(column_values, ring)  # type: ignore[arg-type]
        column_sums.update(_ring_all_gather_arrays(reduced, ring))

    result: List[Optional[np.ndarray]] = [None] * topo.size
    for row in range(topo.rows):
        ring = topo.row_ring(row)
        if len(ring) == 1:
            result[ring[0]] = column_sums[ring[0]]
            continue
        gathered = _ring_all_gather_arrays({core: column_sums[core] for core in ring}, ring)
        for core in ring:
            result[core] = gathered[core]
    return [np.asarray(r) for r in result]


def all_reduce_2d(values: Sequence[GradientSet], topo: TorusTopology) -> List[GradientSet]:
    """Sum a GradientSet across every core of ``topo`` with the 2-D scheme."""

    if len(values) != topo.size:
        raise ShapeError(f"{len(values)} gradient sets for a torus of {topo.size} cores")
    reference = values[0]
    for core, grads in enumerate(values):
        if not grads.same_structure(reference):
            raise ShapeError(f"core {core} gradient structure differs from core 0")
    summed = all_reduce_flat([grads.flatten() for grads in values], topo)
    return [reference.unflatten(flat) for flat in summed]


# ---------------------------------------------------------------------------
# Time model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageTimes:
    gather: float
    network: float
    scatter: float

    @property
    def total(self) -> float:
        return self.gather + self.network + self.scatter

    @property
    def slowest(self) -> float:
        return max(self.gather, self.network, self.scatter)


def summation_stage_times(total_bytes: float, topo: TorusTopology, cost: LinkCostParams) -> StageTimes:
    gather = total_bytes / cost.mem_bandwidth
    rows, cols = topo.rows, topo.cols
    row_phase = 2 * (cols - 1) * (total_bytes / cols / cost.link_bandwidth + cost.hop_latency)
    col_phase = 2 * (rows - 1) * (total_bytes / (rows * cols) / cost.link_bandwidth + cost.hop_latency)
    return StageTimes(gather=gather, network=row_phase + col_phase, scatter=gather)


def pipelined_time(stages: StageTimes, chunks: int, chunk_overhead: float) -> float:
    if chunks < 1:
        raise ValueError(f"chunks must be at least 1, got {chunks}")
    slowest = stages.slowest
    return slowest + (stages.total - slowest) / chunks + chunks * chunk_overhead


def estimate_summation_time(
    grads: GradientSet,
    topo: TorusTopology,
    cost: LinkCostParams,
    chunks: int,
    pipelined: bool,
) -> float:
    """Seconds to sum ``grads`` over ``topo`` (see the module docstring)."""

    if chunks < 1:
        raise ValueError(f"chunks must be at least 1, got {chunks}")
    stages = summation_stage_times(grads.total_bytes, topo, cost)
    if not pipelined:
        return stages.total
    return pipelined_time(stages, chunks, cost.chunk_overhead)


def best_chunk_count(stages: StageTimes, chunk_overhead: float, max_chunks: int = 4096) -> int:
    hidden = stages.total - stages.slowest
    if hidden <= 0:
        return 1
    ideal = math.sqrt(hidden / chunk_overhead)
    candidates = {max(1, min(max_chunks, c)) for c in (math.floor(ideal), math.ceil(ideal))}
    return min(sorted(candidates), key=lambda c: pipelined_time(stages, c, chunk_overhead))


def synthetic_gradient_set(tensor_bytes: Iterable[int]) -> GradientSet:
    """Zero-valued gradient set with the given per-tensor byte sizes (multiples of 4)."""

    arrays: Dict[str, np.ndarray] = {}
    for index, nbytes in enumerate(tensor_bytes):
        if nbytes % 4:
            raise ValueError(f"tensor {index} size {nbytes} is not a whole number of f32 values")
        arrays[f"grad_{index}"] = np.zeros(nbytes // 4, dtype=np.float32)
    return GradientSet.from_arrays(arrays)


def sweep_summation(
    scenario: str,
    grads: GradientSet,
    topo: TorusTopology,
    cost: LinkCostParams,
    chunk_counts: Sequence[int],
) -> List[CostRow]:
    """Unpipelined baseline plus one pipelined row per chunk count."""

    baseline = estimate_summation_time(grads, topo, cost, 1, pipelined=False)
    rows = [
        CostRow(
            scenario=scenario,
            topology=f"{topo.rows}x{topo.cols}",
            total_bytes=grads.total_bytes,
            chunks=1,
            pipelined=False,
            seconds=baseline,
            speedup=1.0,
        )
    ]
    for chunks in chunk_counts:
        seconds = estimate_summation_time(grads, topo, cost, chunks, pipelined=True)
        rows.append(
            CostRow(
                scenario=scenario,
                topology=f"{topo.rows}x{topo.cols}",
                total_bytes=grads.total_bytes,
                chunks=chunks,
                pipelined=True,
                seconds=seconds,
                speedup=baseline / seconds,
            )
        )
    return rows
