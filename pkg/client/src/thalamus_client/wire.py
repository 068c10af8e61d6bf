"""Frame codec for the hub's NDJSON/TCP protocol.

Implements exactly what a client needs: encode hello/subscribe/data lines,
decode the catalog/ack/data/error lines a hub sends back. One frame is one
UTF-8 JSON object per newline; see the hub's docs/protocol.md for the full
contract. This module is self-contained on purpose: the SDK talks to a hub
over a socket and nothing else.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field


class _Missing:
    """Singleton for an absent measurement; "NA" on the wire."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "Missing"

    def __reduce__(self):  # pickling keeps the singleton property
        return (_Missing, ())


MISSING = _Missing()


def is_missing(v) -> bool:
    return v is MISSING


class WireError(Exception):
    """A line that does not parse as a protocol frame."""


@dataclass(frozen=True)
class SignalDescriptor:
    device_id: str
    signal: str
    unit: str
    rate_hz: float
    channels: int

    @property
    def key(self) -> tuple[str, str]:
        return (self.device_id, self.signal)


@dataclass(frozen=True)
class Sample:
    device_id: str
    signal: str
    t: int
    values: tuple
    label: str | None = None

    @property
    def key(self) -> tuple[str, str]:
        return (self.device_id, self.signal)


@dataclass(frozen=True)
class Catalog:
    signals: tuple[SignalDescriptor, ...] = ()


@dataclass(frozen=True)
class Ack:
    of: str
    ok: bool
    detail: str = ""


@dataclass(frozen=True)
class ErrorFrame:
    code: str
    message: str


@dataclass(frozen=True)
class Unknown:
    """Any frame type this client has no use for; kept for logging."""

    type: str
    payload: dict = field(default_factory=dict)


Incoming = Catalog | Ack | Sample | ErrorFrame | Unknown


# ── encoding ─────────────────────────────────────────────────────────


def _reorder(obj):
    if isinstance(obj, dict):
        return {k: _reorder(obj[k]) for k in sorted(obj)}
    if isinstance(obj, (list, tuple)):
        return [_reorder(v) for v in obj]
    return obj


def _dumps(kind: str, body: dict) -> bytes:
    # canonical layout: "type" first, the rest lexicographic at every depth
    ordered = {"type": kind}
    ordered.update(_reorder(body))
    return (
        json.dumps(ordered, separators=(",", ":"), ensure_ascii=False, sort_keys=False)
        + "\n"
    ).encode("utf-8")


def _descriptor_body(d: SignalDescriptor) -> dict:
    return {
        "channels": d.channels,
        "device_id": d.device_id,
        "rate_hz": d.rate_hz,
        "signal": d.signal,
        "unit": d.unit,
    }


def encode_hello_client(identity: str) -> bytes:
    return _dumps("hello", {"id": identity, "role": "client"})


def encode_hello_device(identity: str, descriptors) -> bytes:
    return _dumps(
        "hello",
        {
            "id": identity,
            "role": "device",
            "signals": [_descriptor_body(d) for d in descriptors],
        },
    )


def encode_subscribe(selection, pipeline=()) -> bytes:
    body = {
        "selection": [
            {"device_id": dev, "signal": sig} for dev, sig in selection
        ]
    }
    if pipeline:
        body["transforms"] = [
            {"kind": stage["kind"], "params": dict(stage.get("params", {}))}
            for stage in pipeline
        ]
    else:
        body["transforms"] = []
    return _dumps("subscribe", body)


def encode_data(sample: Sample) -> bytes:
    values = []
    for v in sample.values:
        if v is MISSING:
            values.append("NA")
        elif isinstance(v, bool) or not isinstance(v, (int, float)):
            raise WireError(f"sample value {v!r} is not a number or Missing")
        else:
            values.append(v)
    body = {
        "device_id": sample.device_id,
        "signal": sample.signal,
        "t": sample.t,
        "values": values,
    }
    if sample.label is not None:
        body["label"] = sample.label
    return _dumps("data", body)


# ── decoding ─────────────────────────────────────────────────────────


def _need(obj: dict, key: str, kinds, where: str):
    v = obj.get(key)
    if isinstance(v, bool) or not isinstance(v, kinds):
        raise WireError(f"{where}.{key}: missing or wrong type")
    return v


def _decode_descriptor(obj, where: str) -> SignalDescriptor:
    if not isinstance(obj, dict):
        raise WireError(f"{where}: descriptor must be an object")
    return SignalDescriptor(
        device_id=_need(obj, "device_id", str, where),
        signal=_need(obj, "signal", str, where),
        unit=_need(obj, "unit", str, where),
        rate_hz=float(_need(obj, "rate_hz", (int, float), where)),
        channels=_need(obj, "channels", int, where),
    )


def _decode_values(raw, where: str) -> tuple:
    if not isinstance(raw, list) or not raw:
        raise WireError(f"{where}.values: must be a non-empty array")
    out = []
    for i, v in enumerate(raw):
        if isinstance(v, str):
            if v != "NA":
                raise WireError(f"{where}.values[{i}]: unknown token {v!r}")
            out.append(MISSING)
        elif isinstance(v, bool) or not isinstance(v, (int, float)):
            raise WireError(f"{where}.values[{i}]: not a number or \"NA\"")
        else:
            out.append(v)
    return tuple(out)


def decode_line(line: bytes | str) -> Incoming:
    """One frame (without its newline) into the matching message object."""
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WireError(f"invalid UTF-8: {exc}") from exc
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise WireError(f"malformed JSON: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise WireError("frame is not a JSON object")
    kind = obj.get("type")
    if not isinstance(kind, str):
        raise WireError("frame has no string 'type'")

    if kind == "catalog":
        raw = obj.get("signals", [])
        if not isinstance(raw, list):
            raise WireError("catalog.signals: must be an array")
        return Catalog(
            signals=tuple(
                _decode_descriptor(d, f"catalog.signals[{i}]")
                for i, d in enumerate(raw)
            )
        )
    if kind == "ack":
        return Ack(
            of=_need(obj, "of", str, "ack"),
            ok=bool(obj.get("ok")),
            detail=obj.get("detail", "") if isinstance(obj.get("detail", ""), str) else "",
        )
    if kind == "data":
        t = _need(obj, "t", int, "data")
        if t < 0:
            raise WireError("data.t: negative timestamp")
        label = obj.get("label")
        return Sample(
            device_id=_need(obj, "device_id", str, "data"),
            signal=_need(obj, "signal", str, "data"),
            t=t,
            values=_decode_values(obj.get("values"), "data"),
            label=label if isinstance(label, str) else None,
        )
    if kind == "error":
        return ErrorFrame(
            code=_need(obj, "code", str, "error"),
            message=_need(obj, "message", str, "error"),
        )
    return Unknown(type=kind, payload=obj)
