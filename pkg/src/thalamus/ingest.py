"""Dataset loading (CSV/JSON) and paced replay of recorded streams.

A loaded RecordedStream is immutable and strictly increasing in time;
out-of-order source rows are sorted on load, duplicate timestamps are an
error (downstream synchronization needs unambiguous timelines). Replay is
pull-based: ``replay_next`` hands the caller the next sample and the wall
clock instant it becomes due, so one scheduler paces any number of virtual
devices and unit tests can drive it with a fake clock.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Sequence

from .model import (
    MISSING,
    Sample,
    SampleValue,
    SignalDescriptor,
    Timestamp,
    validate_descriptor,
)

logger = logging.getLogger(__name__)

DEFAULT_NA_TOKENS = ("NA", "NaN", "")


class IngestError(Exception):
    pass


class ParseError(IngestError):
    def __init__(self, reason: str, line_no: int | None = None, column: str | None = None):
        loc = ""
        if line_no is not None:
            loc += f"line {line_no}"
        if column is not None:
            loc += f"{' ' if loc else ''}column {column!r}"
        super().__init__(f"{loc}: {reason}" if loc else reason)
        self.reason = reason
        self.line_no = line_no
        self.column = column


class DuplicateTimestamp(IngestError):
    def __init__(self, t: Timestamp):
        super().__init__(f"duplicate timestamp {t}")
        self.t = t


class EmptyStream(IngestError):
    pass


@dataclass(frozen=True)
class RecordedStream:
    """A fully loaded dataset column group ready for paced replay."""

    descriptor: SignalDescriptor
    timestamps: tuple[Timestamp, ...]
    rows: tuple[tuple[SampleValue, ...], ...]
    reordered: bool = field(default=False, compare=False)  # load metadata

    def __len__(self) -> int:
        return len(self.timestamps)

    def __iter__(self) -> Iterator[Sample]:
        d = self.descriptor
        for t, row in zip(self.timestamps, self.rows):
            yield Sample(d.device_id, d.signal, t, row)

    def sample(self, i: int) -> Sample:
        d = self.descriptor
        return Sample(d.device_id, d.signal, self.timestamps[i], self.rows[i])

    @property
    def missing_count(self) -> int:
        return sum(1 for row in self.rows for v in row if v is MISSING)


@dataclass(frozen=True)
class CsvMapping:
    """How to read one stream out of a CSV file."""

    timestamp_column: str
    value_columns: tuple[str, ...]
    descriptor: SignalDescriptor
    na_tokens: tuple[str, ...] = DEFAULT_NA_TOKENS


def parse_timestamp_ms(text: str, line_no: int | None = None, column: str | None = None) -> Timestamp:
    """Epoch milliseconds from an integer string or ISO-8601 UTC datetime."""
    raw = text.strip()
    try:
        t = int(raw)
    except ValueError:
        try:
            iso = raw[:-1] + "+00:00" if raw.endswith(("Z", "z")) else raw
            dt = datetime.fromisoformat(iso)
        except ValueError:
            raise ParseError(
                f"timestamp {raw!r} is neither integer ms nor ISO-8601",
                line_no,
                column,
            ) from None
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        t = round(dt.timestamp() * 1000)
    if t < 0:
        raise ParseError("negative timestamp", line_no, column)
    return t


def _normalize(
    entries: list[tuple[Timestamp, tuple[SampleValue, ...]]],
    descriptor: SignalDescriptor,
    source: str,
) -> RecordedStream:
    reordered = any(
        entries[i][0] < entries[i - 1][0] for i in range(1, len(entries))
    )
    if reordered:
        entries = sorted(entries, key=lambda e: e[0])
    for i in range(1, len(entries)):
        if entries[i][0] == entries[i - 1][0]:
            raise DuplicateTimestamp(entries[i][0])
    if not entries:
        logger.warning("dataset %s: no data rows", source)
    return RecordedStream(
        descriptor=descriptor,
        timestamps=tuple(e[0] for e in entries),
        rows=tuple(e[1] for e in entries),
        reordered=reordered,
    )


def load_csv(path: str | Path, mapping: CsvMapping) -> RecordedStream:
    """Load one stream from an RFC 4180 CSV file with a header row.

    Cells matching any na_token become MISSING; rows are sorted by timestamp;
    duplicate timestamps are rejected.
    """
    validate_descriptor(mapping.descriptor)
    if mapping.descriptor.channels != len(mapping.value_columns):
        raise ParseError(
            f"descriptor declares {mapping.descriptor.channels} channels but "
            f"mapping lists {len(mapping.value_columns)} value columns"
        )
    path = Path(path)
    na = set(mapping.na_tokens)
    entries: list[tuple[Timestamp, tuple[SampleValue, ...]]] = []
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError("missing header row", line_no=1)
        for col in (mapping.timestamp_column, *mapping.value_columns):
            if col not in reader.fieldnames:
                raise ParseError("column not in header", line_no=1, column=col)
        for row in reader:
            line_no = reader.line_num
            raw_t = row.get(mapping.timestamp_column)
            if raw_t is None:
                raise ParseError("short row", line_no, mapping.timestamp_column)
            t = parse_timestamp_ms(raw_t, line_no, mapping.timestamp_column)
            values: list[SampleValue] = []
            for col in mapping.value_columns:
                cell = row.get(col)
                if cell is None:
                    raise ParseError("short row", line_no, col)
                cell = cell.strip()
                if cell in na:
                    values.append(MISSING)
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"cell {cell!r} is not numeric", line_no, col
                    ) from None
            entries.append((t, tuple(values)))
    return _normalize(entries, mapping.descriptor, str(path))


def load_json(path: str | Path, descriptor: SignalDescriptor) -> RecordedStream:
    """Load a JSON dataset: an array of {"t": ms, "values": [...]} objects.

    Same normalization contract as load_csv; "NA" entries become MISSING.
    """
    validate_descriptor(descriptor)
    path = Path(path)
    try:
        with path.open(encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IngestError(f"cannot open {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc.msg}", line_no=exc.lineno) from exc
    if not isinstance(doc, list):
        raise ParseError("root must be a JSON array")
    entries: list[tuple[Timestamp, tuple[SampleValue, ...]]] = []
    for i, item in enumerate(doc):
        if not isinstance(item, dict):
            raise ParseError(f"entry {i}: expected object")
        t = item.get("t")
        if isinstance(t, float) and t.is_integer():
            t = int(t)
        if isinstance(t, bool) or not isinstance(t, int):
            raise ParseError(f"entry {i}: 't' must be integer milliseconds")
        if t < 0:
            raise ParseError(f"entry {i}: negative timestamp")
        raw_values = item.get("values")
        if not isinstance(raw_values, list) or not raw_values:
            raise ParseError(f"entry {i}: 'values' must be a non-empty array")
        if len(raw_values) != descriptor.channels:
            raise ParseError(
                f"entry {i}: expected {descriptor.channels} channels, "
                f"got {len(raw_values)}"
            )
        values: list[SampleValue] = []
        for j, v in enumerate(raw_values):
            if isinstance(v, str) and v == "NA":
                values.append(MISSING)
            elif isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ParseError(f"entry {i} channel {j}: not a number or \"NA\"")
            else:
                values.append(float(v))
        entries.append((t, tuple(values)))
    return _normalize(entries, descriptor, str(path))


def rebase_timestamps(s: RecordedStream, t_start: Timestamp) -> RecordedStream:
    """Shift the whole stream so it starts at t_start; intervals preserved."""
    if not s.timestamps:
        raise EmptyStream("cannot rebase an empty stream")
    delta = t_start - s.timestamps[0]
    return RecordedStream(
        descriptor=s.descriptor,
        timestamps=tuple(t + delta for t in s.timestamps),
        rows=s.rows,
        reordered=s.reordered,
    )


# ── replay ───────────────────────────────────────────────────────────


@dataclass(frozen=True)
class ReplayPlan:
    """Pacing policy for one or more streams replayed together.

    speed scales pacing (2.0 emits twice as fast); rebase rewrites timestamps
    so the earliest sample lands on the replay epoch (intervals preserved,
    not speed-scaled); loop rewinds streams with timelines continued
    monotonically past their span.
    """

    streams: tuple[RecordedStream, ...]
    speed: float = 1.0
    rebase: bool = True
    loop: bool = False

    def __post_init__(self):
        if not self.speed > 0:
            raise ValueError("speed must be > 0")


class ReplayCursor:
    """Mutable replay progress; single-owner. Epoch locks on the first pull."""

    def __init__(self, plan: ReplayPlan):
        self.plan = plan
        self.epoch: Timestamp | None = None
        self.index = [0] * len(plan.streams)
        self.offset = [0] * len(plan.streams)  # loop-wrap shift per stream
        nonempty = [s.timestamps[0] for s in plan.streams if s.timestamps]
        self.base: Timestamp = min(nonempty) if nonempty else 0


def _loop_step(stream: RecordedStream) -> int:
    # one nominal sample period keeps wrapped timelines strictly increasing
    return max(1, round(1000.0 / stream.descriptor.rate_hz))


def replay_next(
    plan: ReplayPlan, cursor: ReplayCursor, now: Timestamp
) -> tuple[Timestamp, Sample] | None:
    """Pop the earliest pending sample and the instant it becomes due.

    due = epoch + (logical_t - first_t) / speed, where logical_t continues
    past the stream span on loop wraps. Ties across streams resolve in plan
    order. Returns None once every stream is exhausted (loop=False).
    """
    if cursor.epoch is None:
        cursor.epoch = now
    best: tuple[int, int] | None = None  # (logical_t, stream_idx)
    for idx, stream in enumerate(plan.streams):
        if not stream.timestamps:
            continue
        if cursor.index[idx] >= len(stream.timestamps):
            if not plan.loop:
                continue
            span = stream.timestamps[-1] - stream.timestamps[0]
            cursor.offset[idx] += span + _loop_step(stream)
            cursor.index[idx] = 0
        logical_t = stream.timestamps[cursor.index[idx]] + cursor.offset[idx]
        if best is None or logical_t < best[0]:
            best = (logical_t, idx)
    if best is None:
        return None
    logical_t, idx = best
    stream = plan.streams[idx]
    i = cursor.index[idx]
    cursor.index[idx] = i + 1
    due = cursor.epoch + round((logical_t - cursor.base) / plan.speed)
    t_out = logical_t - cursor.base + cursor.epoch if plan.rebase else logical_t
    d = stream.descriptor
    return due, Sample(d.device_id, d.signal, t_out, stream.rows[i])
