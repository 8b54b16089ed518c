"""
CSV persistence for popularity traces.

Header `iter,e0,...,e{E-1}`, one row per iteration, non-negative integers.
The file does not carry tokens_per_batch, so it travels alongside it:
`load_trace(save_trace(trace, path), trace.tokens_per_batch) == trace`.
Without a budget the largest row sum is used, which is exact for any trace
whose busiest row fills the batch (every generated trace does).
"""

import csv
import logging
from pathlib import Path
from typing import List, Optional

from cluster.exceptions import ParseError, SchemaError
from cluster.types import Trace

logger = logging.getLogger(__name__)


def trace_header(expert_classes: int):
    return ['iter'] + [f"e{i}" for i in range(expert_classes)]


def save_trace(trace: Trace, path) -> Path:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as file:
        writer = csv.writer(file, lineterminator='\n')
        writer.writerow(trace_header(trace.expert_classes))
        for row in trace.rows:
            writer.writerow([row.iteration, *row.counts])
    logger.info(f"Saved trace ({len(trace)} iterations, E={trace.expert_classes}) to {path}")
    return path


def _decoded_lines(path: Path) -> List[str]:
    lines = []
    for number, raw in enumerate(path.read_bytes().splitlines(keepends=True), start=1):
        try:
            lines.append(raw.decode('utf-8'))
        except UnicodeDecodeError:
            raise ParseError(f"{path}: not valid UTF-8", line=number)
    return lines


def load_trace(path, tokens_per_batch: Optional[int] = None) -> Trace:
    path = Path(path)
    reader = csv.reader(_decoded_lines(path))
    header = next(reader, None)
    if not header:
        raise SchemaError(f"{path}: empty file, expected header iter,e0,...")
    header = [h.strip() for h in header]
    expert_classes = len(header) - 1
    if expert_classes < 1 or header != trace_header(expert_classes):
        raise SchemaError(f"{path}: header must be iter,e0,...,e{{E-1}}, got {','.join(header)}")

    rows = []
    for line, record in enumerate(reader, start=2):
        if not record:
            continue
        if len(record) != expert_classes + 1:
            raise ParseError(f"expected {expert_classes + 1} values, got {len(record)}", line=line)
        try:
            values = [int(v.strip()) for v in record]
        except ValueError:
            raise ParseError(f"non-integer value in {','.join(record)}", line=line)
        iteration, counts = values[0], values[1:]
        if iteration != len(rows):
            raise ParseError(f"iteration {iteration} out of sequence, expected {len(rows)}", line=line)
        if any(c < 0 for c in counts):
            raise ParseError('negative token count', line=line)
        if tokens_per_batch is not None and sum(counts) > tokens_per_batch:
            raise ParseError(f"row sums to {sum(counts)}, above tokens_per_batch = {tokens_per_batch}", line=line)
        rows.append(counts)

    if not rows:
        raise ParseError(f"{path}: no iteration rows", line=2)
    if tokens_per_batch is None:
        tokens_per_batch = max(sum(r) for r in rows)
    logger.debug(f"Loaded trace {path}: {len(rows)} iterations, E={expert_classes}")
    return Trace.from_counts(rows, tokens_per_batch=tokens_per_batch, expert_classes=expert_classes)
