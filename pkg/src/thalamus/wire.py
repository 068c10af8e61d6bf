"""NDJSON wire codec: one UTF-8 JSON object per line, terminated by 0x0A.

Encoding is canonical -- the "type" key comes first, every remaining key (at
any nesting depth) is in lexicographic order, and separators carry no spaces --
so identical messages always encode to identical bytes. That property is load
bearing: broadcast verification compares raw frame bytes across subscribers.

Decoding is tolerant (any key order, extra whitespace, unknown extra keys) but
strict about structure: missing or mistyped fields, non-finite numbers and
negative timestamps are rejected per frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Union

from .model import (
    MISSING,
    Sample,
    SampleValue,
    SignalDescriptor,
    TransformSpec,
    is_missing,
)

MAX_FRAME_BYTES = 1 << 20  # 1 MiB default cap per frame

NA = "NA"  # wire sentinel for a missing channel value


class WireError(Exception):
    pass


class EncodeError(WireError):
    pass


class DecodeError(WireError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class FrameTooLarge(WireError):
    """A line exceeded the frame cap; the connection is considered poisoned."""


# ── message types ────────────────────────────────────────────────────


@dataclass(frozen=True)
class Hello:
    role: str  # "device" | "client"
    id: str
    signals: tuple[SignalDescriptor, ...] = ()


@dataclass(frozen=True)
class Catalog:
    signals: tuple[SignalDescriptor, ...] = ()


@dataclass(frozen=True)
class Subscribe:
    selection: tuple[tuple[str, str], ...]  # (device_id, signal) pairs
    transforms: tuple[TransformSpec, ...] = ()


@dataclass(frozen=True)
class Ack:
    of: str
    ok: bool
    detail: str = ""


@dataclass(frozen=True)
class Data:
    device_id: str
    signal: str
    t: int
    values: tuple[SampleValue, ...]
    label: str | None = None  # set only on epoch-extraction replies

    def to_sample(self) -> Sample:
        return Sample(self.device_id, self.signal, self.t, self.values)

    @classmethod
    def from_sample(cls, s: Sample, label: str | None = None) -> "Data":
        return cls(s.device_id, s.signal, s.t, s.values, label)


@dataclass(frozen=True)
class Control:
    action: str
    params: dict = field(default_factory=dict)

    def __hash__(self):
        return hash((self.action, tuple(sorted(self.params.items()))))


@dataclass(frozen=True)
class Error:
    code: str
    message: str


Message = Union[Hello, Catalog, Subscribe, Ack, Data, Control, Error]


# ── encoding ─────────────────────────────────────────────────────────


def _check_number(x, what: str) -> None:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise EncodeError(f"{what}: not a number")
    if not math.isfinite(x):
        raise EncodeError(f"{what}: non-finite number")


def _canon(obj):
    """Rebuild dicts with lexicographically ordered keys, recursively."""
    if isinstance(obj, dict):
        return {k: _canon(obj[k]) for k in sorted(obj)}
    if isinstance(obj, (list, tuple)):
        return [_canon(v) for v in obj]
    return obj


def _descriptor_fields(d: SignalDescriptor) -> dict:
    return {
        "device_id": d.device_id,
        "signal": d.signal,
        "unit": d.unit,
        "rate_hz": d.rate_hz,
        "channels": d.channels,
    }


def _wire_values(values, what: str) -> list:
    if not values:
        raise EncodeError(f"{what}: empty values")
    out = []
    for v in values:
        if is_missing(v):
            out.append(NA)
        else:
            _check_number(v, what)
            out.append(v)
    return out


def _body(m: Message) -> tuple[str, dict]:
    if isinstance(m, Hello):
        if m.role not in ("device", "client"):
            raise EncodeError(f"hello.role: {m.role!r}")
        body = {"id": m.id, "role": m.role}
        if m.role == "device":
            body["signals"] = [_descriptor_fields(d) for d in m.signals]
        return "hello", body
    if isinstance(m, Catalog):
        return "catalog", {"signals": [_descriptor_fields(d) for d in m.signals]}
    if isinstance(m, Subscribe):
        sel = [{"device_id": d, "signal": s} for d, s in m.selection]
        tfs = [{"kind": t.kind, "params": dict(t.params)} for t in m.transforms]
        return "subscribe", {"selection": sel, "transforms": tfs}
    if isinstance(m, Ack):
        return "ack", {"of": m.of, "ok": bool(m.ok), "detail": m.detail}
    if isinstance(m, Data):
        if isinstance(m.t, bool) or not isinstance(m.t, int) or m.t < 0:
            raise EncodeError("data.t: must be a non-negative integer")
        body = {
            "device_id": m.device_id,
            "signal": m.signal,
            "t": m.t,
            "values": _wire_values(m.values, "data.values"),
        }
        if m.label is not None:
            body["label"] = m.label
        return "data", body
    if isinstance(m, Control):
        return "control", {"action": m.action, "params": dict(m.params)}
    if isinstance(m, Error):
        return "error", {"code": m.code, "message": m.message}
    raise EncodeError(f"not a Message: {type(m).__name__}")


def encode_frame(m: Message) -> bytes:
    """Canonical single-line UTF-8 JSON for ``m``, plus the trailing newline."""
    kind, body = _body(m)
    payload = {"type": kind}
    payload.update(_canon(body))
    try:
        text = json.dumps(
            payload, ensure_ascii=False, separators=(",", ":"), allow_nan=False
        )
    except (TypeError, ValueError) as exc:
        raise EncodeError(str(exc)) from exc
    return text.encode("utf-8") + b"\n"


# ── decoding ─────────────────────────────────────────────────────────


def _want(obj: dict, key: str, kind: str):
    if key not in obj:
        raise DecodeError(f"missing field {key!r}")
    return _typed(obj[key], key, kind)


def _typed(v, key: str, kind: str):
    if kind == "str":
        if not isinstance(v, str):
            raise DecodeError(f"field {key!r}: expected string")
        return v
    if kind == "bool":
        if not isinstance(v, bool):
            raise DecodeError(f"field {key!r}: expected boolean")
        return v
    if kind == "int":
        if isinstance(v, bool) or not isinstance(v, int):
            raise DecodeError(f"field {key!r}: expected integer")
        return v
    if kind == "num":
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise DecodeError(f"field {key!r}: expected number")
        if not math.isfinite(v):
            raise DecodeError(f"field {key!r}: non-finite number")
        return v
    if kind == "list":
        if not isinstance(v, list):
            raise DecodeError(f"field {key!r}: expected array")
        return v
    if kind == "dict":
        if not isinstance(v, dict):
            raise DecodeError(f"field {key!r}: expected object")
        return v
    raise AssertionError(kind)


def _decode_descriptor(obj, where: str) -> SignalDescriptor:
    if not isinstance(obj, dict):
        raise DecodeError(f"{where}: descriptor must be an object")
    d = SignalDescriptor(
        device_id=_want(obj, "device_id", "str"),
        signal=_want(obj, "signal", "str"),
        unit=_want(obj, "unit", "str"),
        rate_hz=_want(obj, "rate_hz", "num"),
        channels=_want(obj, "channels", "int"),
    )
    if d.rate_hz <= 0:
        raise DecodeError(f"{where}: rate_hz must be > 0")
    if d.channels < 1:
        raise DecodeError(f"{where}: channels must be >= 1")
    return d


def _decode_values(raw, key: str) -> tuple[SampleValue, ...]:
    vals = _typed(raw, key, "list")
    if not vals:
        raise DecodeError(f"field {key!r}: empty values")
    out: list[SampleValue] = []
    for v in vals:
        if isinstance(v, str) and v == NA:
            out.append(MISSING)
        elif isinstance(v, bool) or not isinstance(v, (int, float)):
            raise DecodeError(f"field {key!r}: entries must be numbers or {NA!r}")
        elif not math.isfinite(v):
            raise DecodeError(f"field {key!r}: non-finite number")
        else:
            out.append(v)
    return tuple(out)


def _reject_constant(token: str):
    raise DecodeError(f"non-finite number literal {token!r}")


def decode_frame(line: bytes | str) -> Message:
    """Parse one frame (without its trailing newline) into a Message."""
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"invalid UTF-8: {exc}") from exc
    try:
        obj = json.loads(line, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise DecodeError(f"malformed JSON: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise DecodeError("frame is not a JSON object")
    kind = _want(obj, "type", "str")

    if kind == "hello":
        role = _want(obj, "role", "str")
        if role not in ("device", "client"):
            raise DecodeError(f"hello.role: unknown role {role!r}")
        signals: tuple[SignalDescriptor, ...] = ()
        if role == "device":
            raw = _want(obj, "signals", "list")
            signals = tuple(
                _decode_descriptor(d, f"signals[{i}]") for i, d in enumerate(raw)
            )
        return Hello(role=role, id=_want(obj, "id", "str"), signals=signals)

    if kind == "catalog":
        raw = _want(obj, "signals", "list")
        return Catalog(
            signals=tuple(
                _decode_descriptor(d, f"signals[{i}]") for i, d in enumerate(raw)
            )
        )

    if kind == "subscribe":
        raw_sel = _want(obj, "selection", "list")
        selection = []
        for i, entry in enumerate(raw_sel):
            if not isinstance(entry, dict):
                raise DecodeError(f"selection[{i}]: expected object")
            selection.append(
                (_want(entry, "device_id", "str"), _want(entry, "signal", "str"))
            )
        raw_tf = obj.get("transforms", [])
        raw_tf = _typed(raw_tf, "transforms", "list")
        transforms = []
        for i, entry in enumerate(raw_tf):
            if not isinstance(entry, dict):
                raise DecodeError(f"transforms[{i}]: expected object")
            transforms.append(
                TransformSpec(
                    kind=_want(entry, "kind", "str"),
                    params=_want(entry, "params", "dict"),
                )
            )
        return Subscribe(selection=tuple(selection), transforms=tuple(transforms))

    if kind == "ack":
        return Ack(
            of=_want(obj, "of", "str"),
            ok=_want(obj, "ok", "bool"),
            detail=_want(obj, "detail", "str"),
        )

    if kind == "data":
        t = _want(obj, "t", "int")
        if t < 0:
            raise DecodeError("negative timestamp")
        label = obj.get("label")
        if label is not None:
            label = _typed(label, "label", "str")
        return Data(
            device_id=_want(obj, "device_id", "str"),
            signal=_want(obj, "signal", "str"),
            t=t,
            values=_decode_values(obj.get("values"), "values"),
            label=label,
        )

    if kind == "control":
        return Control(
            action=_want(obj, "action", "str"), params=_want(obj, "params", "dict")
        )

    if kind == "error":
        return Error(
            code=_want(obj, "code", "str"), message=_want(obj, "message", "str")
        )

    raise DecodeError(f"unknown type {kind!r}")


# ── stream re-framing ────────────────────────────────────────────────


class FrameReader:
    """Re-frames an arbitrary byte stream into Messages on 0x0A boundaries.

    One instance per connection: it owns a partial-line buffer. Malformed
    frames surface as DecodeError values in the result list so later frames on
    the same connection still parse. A line exceeding ``max_frame_bytes``
    raises FrameTooLarge and poisons the reader for good.
    """

    def __init__(self, max_frame_bytes: int = MAX_FRAME_BYTES):
        self.max_frame_bytes = max_frame_bytes
        self._buf = bytearray()
        self.poisoned = False

    def feed(self, chunk: bytes) -> list[Message | DecodeError]:
        if self.poisoned:
            raise FrameTooLarge("reader poisoned by oversized frame")
        self._buf.extend(chunk)
        out: list[Message | DecodeError] = []
        while True:
            nl = self._buf.find(b"\n")
            if nl < 0:
                if len(self._buf) > self.max_frame_bytes:
                    self.poisoned = True
                    raise FrameTooLarge(
                        f"frame exceeds {self.max_frame_bytes} bytes"
                    )
                return out
            line = bytes(self._buf[:nl])
            del self._buf[: nl + 1]
            if len(line) > self.max_frame_bytes:
                self.poisoned = True
                raise FrameTooLarge(f"frame exceeds {self.max_frame_bytes} bytes")
            if not line.strip():
                continue  # blank lines carry no frame
            try:
                out.append(decode_frame(line))
            except DecodeError as err:
                out.append(err)
