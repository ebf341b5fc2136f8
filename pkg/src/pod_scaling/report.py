"""Tables, CSV and JSON-lines output for experiment results.

Files are byte-stable: fixed column order, ``repr`` floats, sorted JSON keys
and no timestamps.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

from tabulate import tabulate

from .models import BatchEpochRow, MetricsRecord, RunSummary

logger = logging.getLogger(__name__)


def _format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    return str(value)


def _as_row(record: Any) -> Dict[str, Any]:
    if dataclasses.is_dataclass(record):
        row = {f.name: getattr(record, f.name) for f in dataclasses.fields(record)}
        if isinstance(getattr(type(record), "passed", None), property):
            row["passed"] = record.passed
        return row
    return dict(record)


def build_table(records: Sequence[Any], floatfmt: str = ".6g") -> str:
    """Terminal table of dataclass records (or plain mappings)."""

    rows = [_as_row(r) for r in records]
    if not rows:
        return "(no rows)"
    headers = list(rows[0])
    body = [[row[h] if not isinstance(row[h], tuple) else _format_cell(row[h]) for h in headers] for row in rows]
    return tabulate(body, headers=headers, tablefmt="github", floatfmt=floatfmt)


def write_csv(path: Path, records: Sequence[Any]) -> None:
    rows = [_as_row(r) for r in records]
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        if rows:
            headers = list(rows[0])
            writer.writerow(headers)
            for row in rows:
                writer.writerow([_format_cell(row[h]) for h in headers])
    logger.info("Wrote %s", path)


def write_jsonl(path: Path, records: Iterable[Mapping[str, Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        for record in records:
            handle.write(json.dumps(record, sort_keys=True) + "\n")
    logger.info("Wrote %s", path)


def metrics_lines(label: str, seed: int, global_batch: int, records: Sequence[MetricsRecord]) -> List[Dict[str, Any]]:
    return [dict(record.to_dict(), run=label, seed=seed, global_batch=global_batch) for record in records]


def write_error_record(path: Optional[Path], payload: Mapping[str, Any]) -> str:
    """Serialize an error record; also write it to ``path`` when given."""

    text = json.dumps(dict(payload), sort_keys=True)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n", encoding="utf-8")
    return text


def _nondecreasing(values: Sequence[Optional[int]]) -> bool:
    if any(v is None for v in values):
        return False
    return all(a <= b for a, b in zip(values, values[1:]))  # type: ignore[operator]


def report_batch_epoch_curve(results: Sequence[RunSummary]) -> List[BatchEpochRow]:
    """Mean epochs-to-target per global batch size, smallest batch first.

    A batch size whose mean is below the previous one's is flagged rather than
    rejected; the trend is expected, not guaranteed.
    """

    if not results:
        raise ValueError("no training results to report")
    by_batch: Dict[int, List[RunSummary]] = defaultdict(list)
    for summary in results:
        by_batch[summary.global_batch].append(summary)
    rows: List[BatchEpochRow] = []
    previous: Optional[float] = None
    for batch in sorted(by_batch):
        runs = by_batch[batch]
        reached = [r.epochs_to_target for r in runs if r.epochs_to_target is not None]
        mean = sum(reached) / len(reached) if reached else None
        violation = previous is not None and mean is not None and mean < previous
        if violation:
            logger.warning("epochs to target drop from %.2f to %.2f at batch %d", previous, mean, batch)
        if mean is None:
            logger.warning("no run at batch %d reached the target", batch)
        rows.append(
            BatchEpochRow(
                global_batch=batch,
                epochs_to_target=mean,
                runs_reaching_target=len(reached),
                runs=len(runs),
                monotone_violation=violation,
            )
        )
        if mean is not None:
            previous = mean
    return rows


def monotone_seed_fraction(results: Sequence[RunSummary]) -> float:
    """Share of seeds whose epochs-to-target never decreases as the batch grows."""

    by_seed: Dict[int, Dict[int, Optional[int]]] = defaultdict(dict)
    for summary in results:
        by_seed[summary.seed][summary.global_batch] = summary.epochs_to_target
    if not by_seed:
        raise ValueError("no training results to report")
    good = sum(
        1 for per_batch in by_seed.values()
        if _nondecreasing([per_batch[b] for b in sorted(per_batch)])
    )
    return good / len(by_seed)
