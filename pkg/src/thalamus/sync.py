"""Timeline operations: ordered merge, epoch extraction, multi-rate alignment.

All functions are pure over immutable snapshots; the hub takes a consistent
copy of its history buffer before calling in. Epoch bounds are inclusive on
BOTH ends -- with integer-millisecond timelines a closed interval is what a
human means by "from t0 to t1". No interpolation anywhere: alignment pairs
existing samples or leaves a cell absent.
"""

from __future__ import annotations

import heapq
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .model import Sample, SampleValue, Timestamp

StreamKey = tuple[str, str]  # (device_id, signal)


class UnsortedInput(ValueError):
    def __init__(self, device_id: str, signal: str, position: int):
        super().__init__(
            f"stream {device_id}/{signal}: timestamp decreases at position {position}"
        )
        self.device_id = device_id
        self.signal = signal
        self.position = position


class UnknownReference(KeyError):
    pass


@dataclass(frozen=True)
class Epoch:
    """Closed time interval [t0, t1], typically around a stimulus."""

    t0: Timestamp
    t1: Timestamp
    label: str = ""

    def __post_init__(self):
        if self.t0 > self.t1:
            raise ValueError(f"epoch t0 {self.t0} > t1 {self.t1}")

    def contains(self, t: Timestamp) -> bool:
        return self.t0 <= t <= self.t1


@dataclass(frozen=True)
class AlignedFrame:
    """One reference instant with the sample values paired to it per stream."""

    t: Timestamp
    cells: dict[StreamKey, tuple[SampleValue, ...]] = field(default_factory=dict)


def merge_ordered(streams: Sequence[Sequence[Sample]]) -> list[Sample]:
    """Merge per-stream sorted sequences into one globally ordered flow.

    Ties on t break by (device_id, signal) lexicographic, then input order
    (stream index, then position) -- fully deterministic. Raises UnsortedInput
    if any input sequence decreases.
    """
    for samples in streams:
        for pos in range(1, len(samples)):
            if samples[pos].t < samples[pos - 1].t:
                bad = samples[pos]
                raise UnsortedInput(bad.device_id, bad.signal, pos)

    heap: list[tuple[int, str, str, int, int]] = []
    for idx, samples in enumerate(streams):
        if samples:
            s = samples[0]
            heapq.heappush(heap, (s.t, s.device_id, s.signal, idx, 0))
    merged: list[Sample] = []
    while heap:
        _, _, _, idx, pos = heapq.heappop(heap)
        merged.append(streams[idx][pos])
        nxt = pos + 1
        if nxt < len(streams[idx]):
            s = streams[idx][nxt]
            heapq.heappush(heap, (s.t, s.device_id, s.signal, idx, nxt))
    return merged


def extract_epoch(stream: Iterable[Sample], epoch: Epoch) -> list[Sample]:
    """All samples with t0 <= t <= t1, in original order, values untouched."""
    return [s for s in stream if epoch.contains(s.t)]


def align(
    streams: Mapping[StreamKey, Sequence[Sample]],
    reference: StreamKey | float,
    tolerance_ms: int,
    strategy: str = "nearest",
) -> list[AlignedFrame]:
    """Pair every stream to a common set of reference instants.

    ``reference`` is either the key of one input stream (its sample instants
    become the frame instants, and its own values fill its cell) or a fixed
    rate in Hz (instants step through the covered time range at that rate).
    Per instant and stream, ``nearest`` picks the sample minimizing |t - ref|
    within tolerance (equidistant neighbors resolve to the earlier sample);
    ``last_before`` picks the latest sample with t <= ref within tolerance.
    Cells with no qualifying sample stay absent.
    """
    if tolerance_ms < 0:
        raise ValueError("tolerance_ms must be >= 0")
    if strategy not in ("nearest", "last_before"):
        raise ValueError(f"unknown strategy {strategy!r}")

    if isinstance(reference, tuple):
        if reference not in streams:
            raise UnknownReference(reference)
        instants = [s.t for s in streams[reference]]
    else:
        rate = float(reference)
        if rate <= 0:
            raise ValueError("reference rate must be > 0")
        all_ts = [s.t for samples in streams.values() for s in samples]
        if not all_ts:
            return []
        step = max(1, round(1000.0 / rate))
        instants = list(range(min(all_ts), max(all_ts) + 1, step))

    by_key = {
        key: ([s.t for s in samples], samples) for key, samples in streams.items()
    }
    frames: list[AlignedFrame] = []
    for ref_t in instants:
        cells: dict[StreamKey, tuple[SampleValue, ...]] = {}
        for key, (ts, samples) in by_key.items():
            picked = _pick(ts, ref_t, tolerance_ms, strategy)
            if picked is not None:
                cells[key] = samples[picked].values
        frames.append(AlignedFrame(t=ref_t, cells=cells))
    return frames


def _pick(ts: Sequence[int], ref: int, tol: int, strategy: str) -> int | None:
    if not ts:
        return None
    if strategy == "last_before":
        idx = bisect_right(ts, ref) - 1
        if idx >= 0 and ref - ts[idx] <= tol:
            return idx
        return None
    # nearest: candidates straddle the insertion point; tie goes to the earlier
    idx = bisect_left(ts, ref)
    best: int | None = None
    best_dist = tol + 1
    for cand in (idx - 1, idx):
        if 0 <= cand < len(ts):
            dist = abs(ts[cand] - ref)
            if dist < best_dist:
                best, best_dist = cand, dist
    return best
