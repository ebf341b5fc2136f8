"""Sequence input pipeline: windowed bucketization, host distribution, eval trimming.

An example of length L lands in bucket ``(L - 1) // w``, so every batch drawn
from one bucket has a length spread below ``w``. Batches are emitted as soon
as their bucket fills; leftover partial batches follow at the end in bucket
order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, TypeVar

import numpy as np

from .errors import ShapeError

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass(frozen=True)
class SequenceExample:
    tokens: Tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.tokens:
            raise ValueError("a sequence example needs at least one token")

    @property
    def length(self) -> int:
        return len(self.tokens)

    @classmethod
    def of_length(cls, length: int, token: int = 1) -> "SequenceExample":
        return cls(tokens=(token,) * length)


@dataclass(frozen=True)
class BucketizerConfig:
    window_width: int
    batch_size: int
    drop_partial: bool = False

    def __post_init__(self) -> None:
        if self.window_width < 1:
            raise ValueError(f"window_width must be >= 1, got {self.window_width}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class Batch:
    examples: Tuple[SequenceExample, ...]
    bucket: int = -1
    partial: bool = False

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def lengths(self) -> List[int]:
        return [ex.length for ex in self.examples]

    @property
    def max_length(self) -> int:
        return max(self.lengths, default=0)

    @property
    def spread(self) -> int:
        lengths = self.lengths
        return max(lengths) - min(lengths) if lengths else 0


def bucket_index(length: int, window_width: int) -> int:
    return (length - 1) // window_width


def window_bucketize(examples: Sequence[SequenceExample], cfg: BucketizerConfig) -> List[Batch]:
    pending: Dict[int, List[SequenceExample]] = {}
    batches: List[Batch] = []
    for example in examples:
        bucket = bucket_index(example.length, cfg.window_width)
        members = pending.setdefault(bucket, [])
        members.append(example)
        if len(members) == cfg.batch_size:
            batches.append(Batch(examples=tuple(members), bucket=bucket))
            pending[bucket] = []
    for bucket in sorted(pending):
        members = pending[bucket]
        if members and not cfg.drop_partial:
            batches.append(Batch(examples=tuple(members), bucket=bucket, partial=True))
    logger.debug("bucketized %d examples into %d batches (w=%d)", len(examples), len(batches), cfg.window_width)
    return batches


def random_batches(
    examples: Sequence[SequenceExample],
    batch_size: int,
    rng: np.random.Generator,
    drop_partial: bool = False,
) -> List[Batch]:
    """Shuffled fixed-size batches with no regard to length."""

    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(len(examples))
    batches: List[Batch] = []
    for start in range(0, len(order), batch_size):
        members = tuple(examples[i] for i in order[start:start + batch_size])
        partial = len(members) < batch_size
        if partial and drop_partial:
            continue
        batches.append(Batch(examples=members, partial=partial))
    return batches


def round_robin_distribute(batches: Sequence[T], hosts: int) -> List[List[T]]:
    """Batch ``i`` goes to host ``i % hosts``; per-host order follows input order."""

    if hosts < 1:
        raise ValueError(f"hosts must be >= 1, got {hosts}")
    per_host: List[List[T]] = [[] for _ in range(hosts)]
    for i, batch in enumerate(batches):
        per_host[i % hosts].append(batch)
    return per_host


def split_global_batch(batch: Batch, workers: int) -> List[Batch]:
    """Cut one global batch into ``workers`` contiguous sub-batches (sizes differ by at most one)."""

    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    base, extra = divmod(len(batch), workers)
    parts: List[Batch] = []
    start = 0
    for worker in range(workers):
        stop = start + base + (1 if worker < extra else 0)
        parts.append(Batch(examples=batch.examples[start:stop], bucket=batch.bucket, partial=batch.partial))
        start = stop
    return parts


def assign_steps(batches: Sequence[Batch], workers: int) -> List[List[Batch]]:
    """Per-step worker assignment from round-robin distributed batches.

    Step ``s`` runs batch ``s`` of every worker; trailing steps where some
    worker has no batch left are not synchronous steps and are dropped.
    """

    per_worker = round_robin_distribute(batches, workers)
    steps = min(len(q) for q in per_worker)
    return [[per_worker[w][s] for w in range(workers)] for s in range(steps)]


def load_balance_metric(steps: Sequence[Sequence[Batch]]) -> float:
    """Synchronous time over mean work: sum over steps of max cost / sum of mean cost.

    A batch costs its longest sequence; an empty batch costs nothing. For one
    step this is the plain max/mean ratio.
    """

    if not steps or any(len(step) == 0 for step in steps):
        raise ValueError("load_balance_metric needs at least one step with at least one worker")
    slowest = 0.0
    mean = 0.0
    for step in steps:
        costs = [batch.max_length for batch in step]
        slowest += max(costs)
        mean += sum(costs) / len(costs)
    if mean == 0.0:
        raise ValueError("load_balance_metric of steps with no work")
    return slowest / mean


def padding_fraction(batches: Sequence[Batch]) -> float:
    """Share of padded slots when each batch is padded to its own longest sequence."""

    slots = sum(len(b) * b.max_length for b in batches)
    if slots == 0:
        return 0.0
    real = sum(sum(b.lengths) for b in batches)
    return 1.0 - real / slots


# ---------------------------------------------------------------------------
# Padded eval sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PaddedSequences:
    tokens: np.ndarray
    lengths: np.ndarray

    def __post_init__(self) -> None:
        if self.tokens.ndim != 2 or self.lengths.shape != (self.tokens.shape[0],):
            raise ShapeError(f"tokens {self.tokens.shape} and lengths {self.lengths.shape} do not describe [N, P]")

    @property
    def padded_len(self) -> int:
        return self.tokens.shape[1]

    @property
    def max_real_length(self) -> int:
        return int(self.lengths.max()) if self.lengths.size else 0

    def to_examples(self) -> List[SequenceExample]:
        return [
            SequenceExample(tokens=tuple(int(v) for v in row[:n]))
            for row, n in zip(self.tokens, self.lengths)
        ]


def pad_sequences(examples: Sequence[SequenceExample], padded_len: int, pad_id: int = 0) -> PaddedSequences:
    longest = max((ex.length for ex in examples), default=0)
    if padded_len < longest:
        raise ShapeError(f"padded length {padded_len} is shorter than the longest example ({longest})")
    tokens = np.full((len(examples), padded_len), pad_id, dtype=np.int64)
    for row, ex in enumerate(examples):
        tokens[row, :ex.length] = ex.tokens
    lengths = np.array([ex.length for ex in examples], dtype=np.int64)
    return PaddedSequences(tokens=tokens, lengths=lengths)


def trim_eval_to_max_real_length(padded: PaddedSequences) -> PaddedSequences:
    """Re-pad the eval set to its longest real example."""

    target = padded.max_real_length
    if target < padded.padded_len:
        logger.info("Trimming eval sequences from %d to %d", padded.padded_len, target)
    return PaddedSequences(tokens=padded.tokens[:, :target].copy(), lengths=padded.lengths.copy())


# ---------------------------------------------------------------------------
# Corpora
# ---------------------------------------------------------------------------


def read_sequence_corpus(path: Path) -> List[SequenceExample]:
    """One example per line, whitespace-separated integer token ids; blank lines skipped."""

    if not path.exists():
        raise FileNotFoundError(f"Corpus not found: {path}")
    examples: List[SequenceExample] = []
    with path.open("r", encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            fields = line.split()
            if not fields:
                continue
            try:
                examples.append(SequenceExample(tokens=tuple(int(f) for f in fields)))
            except ValueError as exc:
                raise ValueError(f"{path}:{number}: token ids must be integers") from exc
    logger.info("Read %d sequences from %s", len(examples), path)
    return examples


def synthetic_corpus(
    rng: np.random.Generator,
    count: int,
    min_length: int,
    max_length: int,
    vocab_size: int = 1000,
) -> List[SequenceExample]:
    """Sequences with lengths uniform in [min_length, max_length]."""

    if not 1 <= min_length <= max_length:
        raise ValueError(f"need 1 <= min_length <= max_length, got {min_length}, {max_length}")
    lengths = rng.integers(min_length, max_length + 1, size=count)
    return [
        SequenceExample(tokens=tuple(int(t) for t in rng.integers(1, vocab_size, size=int(n))))
        for n in lengths
    ]
