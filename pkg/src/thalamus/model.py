"""Core domain types shared by every module.

Everything here is an immutable value, safe to copy and hand between threads
without coordination. Timestamps are integer milliseconds since the Unix epoch
(UTC) -- never floats -- so long replays cannot accumulate rounding drift.
Missing measurements are a first-class marker, distinct from any numeric
sentinel; substitution (0 fill etc.) happens only in explicit transform stages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

# Milliseconds since 1970-01-01T00:00:00 UTC; always non-negative.
Timestamp = int


class MissingType:
    """Singleton marker for an absent measurement. 0.0 is a real value."""

    _instance: "MissingType | None" = None

    def __new__(cls) -> "MissingType":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "MISSING"

    def __reduce__(self):
        # pickle resolves back to the singleton
        return (MissingType, ())


MISSING = MissingType()

SampleValue = Union[float, MissingType]


def is_missing(v: SampleValue) -> bool:
    return isinstance(v, MissingType)


class ValidationError(ValueError):
    """A field of a domain value violates its invariants."""

    def __init__(self, field_name: str, reason: str):
        super().__init__(f"{field_name}: {reason}")
        self.field = field_name
        self.reason = reason


@dataclass(frozen=True)
class SignalDescriptor:
    """Metadata for one named stream of one device; the unit of the catalog."""

    device_id: str
    signal: str
    unit: str
    rate_hz: float
    channels: int

    @property
    def key(self) -> tuple[str, str]:
        return (self.device_id, self.signal)


def validate_descriptor(d: SignalDescriptor) -> None:
    """Raise ValidationError naming the first violated field."""
    if not isinstance(d.device_id, str) or not d.device_id:
        raise ValidationError("device_id", "must be a non-empty string")
    if not isinstance(d.signal, str) or not d.signal:
        raise ValidationError("signal", "must be a non-empty string")
    if not isinstance(d.unit, str):
        raise ValidationError("unit", "must be a string")
    if isinstance(d.rate_hz, bool) or not isinstance(d.rate_hz, (int, float)):
        raise ValidationError("rate_hz", "must be a number")
    if not math.isfinite(d.rate_hz) or d.rate_hz <= 0:
        raise ValidationError("rate_hz", "must be finite and > 0")
    if isinstance(d.channels, bool) or not isinstance(d.channels, int):
        raise ValidationError("channels", "must be an integer")
    if d.channels < 1:
        raise ValidationError("channels", "must be >= 1")


@dataclass(frozen=True)
class Sample:
    """One timestamped measurement event of one signal (possibly multi-channel).

    ``values`` always has length equal to the signal's channel count; individual
    channels may be MISSING.
    """

    device_id: str
    signal: str
    t: Timestamp
    values: tuple[SampleValue, ...]

    @property
    def key(self) -> tuple[str, str]:
        return (self.device_id, self.signal)


def validate_sample(s: Sample, channels: int | None = None) -> None:
    """Check Sample invariants; ``channels`` pins the expected width if known."""
    if isinstance(s.t, bool) or not isinstance(s.t, int):
        raise ValidationError("t", "timestamp must be an integer")
    if s.t < 0:
        raise ValidationError("t", "negative timestamp")
    if not s.values:
        raise ValidationError("values", "must be non-empty")
    if channels is not None and len(s.values) != channels:
        raise ValidationError(
            "values", f"expected {channels} channels, got {len(s.values)}"
        )
    for i, v in enumerate(s.values):
        if is_missing(v):
            continue
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValidationError("values", f"channel {i}: not a number")
        if not math.isfinite(v):
            raise ValidationError("values", f"channel {i}: non-finite number")


@dataclass(frozen=True)
class TransformSpec:
    """Declarative description of one pipeline stage.

    ``kind`` is one of missing_policy, savgol, kalman, noise, delay; ``params``
    is validated against the kind's schema by the dsp module.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __hash__(self):
        return hash((self.kind, tuple(sorted(self.params.items()))))


TRANSFORM_KINDS = ("missing_policy", "savgol", "kalman", "noise", "delay")
