"""Operator command line: serve, validate, transform, probe, extract, stats.

Every failure path exits nonzero and prints exactly one line to stderr with a
machine-parseable prefix (``config_error:``, ``parse_error:`` and so on), so
scripts wrapping these commands can branch on the first token. ``serve`` is
the only long-running command; the rest are single-threaded front doors.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import signal
import socket
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import dsp, hub, sync
from .ingest import (
    DEFAULT_NA_TOKENS,
    CsvMapping,
    DuplicateTimestamp,
    IngestError,
    ParseError,
    RecordedStream,
    ReplayPlan,
    load_csv,
    load_json,
)
from .model import (
    MISSING,
    SignalDescriptor,
    TransformSpec,
    ValidationError,
    is_missing,
    validate_descriptor,
)
from .wire import (
    NA,
    Ack,
    Catalog,
    Control,
    Data,
    DecodeError,
    Error,
    Hello,
    Message,
    Subscribe,
    decode_frame,
    encode_frame,
)

DEFAULT_LISTEN = "0.0.0.0:7331"
CONFIG_ENV = "THALAMUS_CONFIG"

EXIT_CONFIG = 2
EXIT_BIND = 3


class ConfigError(Exception):
    """Names the offending config field in dotted-path form."""

    def __init__(self, field_path: str, reason: str):
        super().__init__(f"{field_path}: {reason}")
        self.field = field_path
        self.reason = reason


def _fail(code: int, prefix: str, message) -> int:
    line = " ".join(str(message).split())  # keep errors single-line
    print(f"{prefix}: {line}", file=sys.stderr)
    return code


# ── hub configuration ────────────────────────────────────────────────


@dataclass(frozen=True)
class SourceConfig:
    format: str  # "csv" | "json"
    path: str
    timestamp_column: str | None = None
    value_columns: tuple[str, ...] = ()
    na_tokens: tuple[str, ...] = DEFAULT_NA_TOKENS


@dataclass(frozen=True)
class ReplaySettings:
    speed: float = 1.0
    rebase: bool = True
    loop: bool = False


@dataclass(frozen=True)
class DeviceConfig:
    descriptor: SignalDescriptor
    source: SourceConfig
    replay: ReplaySettings = field(default_factory=ReplaySettings)


@dataclass(frozen=True)
class HubConfig:
    listen: str = DEFAULT_LISTEN
    admin_token: str = ""
    seed: int = 0
    devices: tuple[DeviceConfig, ...] = ()
    limits: hub.HubLimits = field(default_factory=hub.HubLimits)
    replay_settle_ms: int = 500


_REQUIRED = object()


def _want(obj: dict, key: str, kinds, where: str, default=_REQUIRED):
    if key not in obj:
        if default is _REQUIRED:
            raise ConfigError(f"{where}.{key}" if where else key, "missing field")
        return default
    v = obj[key]
    if isinstance(v, bool) and bool not in kinds:
        raise ConfigError(f"{where}.{key}" if where else key, "wrong type")
    if not isinstance(v, tuple(k for k in kinds)):
        raise ConfigError(f"{where}.{key}" if where else key, "wrong type")
    return v


def _no_extras(obj: dict, allowed: set, where: str) -> None:
    extra = set(obj) - allowed
    if extra:
        raise ConfigError(where or "config", f"unknown fields {sorted(extra)}")


def parse_listen(text: str) -> tuple[str, int]:
    host, sep, port_text = text.rpartition(":")
    if not sep:
        raise ConfigError("listen", "expected host:port")
    try:
        port = int(port_text)
    except ValueError:
        raise ConfigError("listen", f"bad port {port_text!r}") from None
    if not 0 <= port <= 65535:
        raise ConfigError("listen", f"port {port} out of range")
    return host or "0.0.0.0", port


def _parse_descriptor(obj, where: str) -> SignalDescriptor:
    if not isinstance(obj, dict):
        raise ConfigError(where, "expected object")
    _no_extras(obj, {"device_id", "signal", "unit", "rate_hz", "channels"}, where)
    d = SignalDescriptor(
        device_id=_want(obj, "device_id", (str,), where),
        signal=_want(obj, "signal", (str,), where),
        unit=_want(obj, "unit", (str,), where, ""),
        rate_hz=_want(obj, "rate_hz", (int, float), where),
        channels=_want(obj, "channels", (int,), where),
    )
    try:
        validate_descriptor(d)
    except ValidationError as exc:
        raise ConfigError(f"{where}.{exc.field}", exc.reason) from None
    return d


def _parse_source(obj, where: str) -> SourceConfig:
    if not isinstance(obj, dict):
        raise ConfigError(where, "expected object")
    _no_extras(obj, {"format", "path", "mapping"}, where)
    fmt = _want(obj, "format", (str,), where)
    if fmt not in ("csv", "json"):
        raise ConfigError(f"{where}.format", f"unknown format {fmt!r}")
    path = _want(obj, "path", (str,), where)
    mapping = obj.get("mapping")
    ts_col: str | None = None
    cols: tuple[str, ...] = ()
    na_tokens = DEFAULT_NA_TOKENS
    if mapping is not None:
        mwhere = f"{where}.mapping"
        if not isinstance(mapping, dict):
            raise ConfigError(mwhere, "expected object")
        _no_extras(
            mapping, {"timestamp_column", "value_columns", "na_tokens"}, mwhere
        )
        ts_col = _want(mapping, "timestamp_column", (str,), mwhere)
        raw_cols = _want(mapping, "value_columns", (list,), mwhere)
        if not raw_cols or not all(isinstance(c, str) for c in raw_cols):
            raise ConfigError(
                f"{mwhere}.value_columns", "expected non-empty array of strings"
            )
        cols = tuple(raw_cols)
        raw_na = mapping.get("na_tokens")
        if raw_na is not None:
            if not isinstance(raw_na, list) or not all(
                isinstance(x, str) for x in raw_na
            ):
                raise ConfigError(f"{mwhere}.na_tokens", "expected array of strings")
            na_tokens = tuple(raw_na)
    elif fmt == "csv":
        raise ConfigError(f"{where}.mapping", "required for csv sources")
    return SourceConfig(
        format=fmt,
        path=path,
        timestamp_column=ts_col,
        value_columns=cols,
        na_tokens=na_tokens,
    )


def _parse_replay(obj, where: str) -> ReplaySettings:
    if obj is None:
        return ReplaySettings()
    if not isinstance(obj, dict):
        raise ConfigError(where, "expected object")
    _no_extras(obj, {"speed", "rebase", "loop"}, where)
    speed = _want(obj, "speed", (int, float), where, 1.0)
    if speed <= 0:
        raise ConfigError(f"{where}.speed", "must be > 0")
    return ReplaySettings(
        speed=float(speed),
        rebase=_want(obj, "rebase", (bool,), where, True),
        loop=_want(obj, "loop", (bool,), where, False),
    )


def _parse_limits(obj, where: str) -> hub.HubLimits:
    if obj is None:
        return hub.HubLimits()
    if not isinstance(obj, dict):
        raise ConfigError(where, "expected object")
    _no_extras(
        obj,
        {"queue_capacity", "max_frame_bytes", "history_seconds", "heartbeat_seconds"},
        where,
    )
    defaults = hub.HubLimits()
    cap = _want(obj, "queue_capacity", (int,), where, defaults.queue_capacity)
    frame = _want(obj, "max_frame_bytes", (int,), where, defaults.max_frame_bytes)
    hist = _want(obj, "history_seconds", (int,), where, defaults.history_seconds)
    beat = _want(
        obj, "heartbeat_seconds", (int, float), where, defaults.heartbeat_seconds
    )
    for name, v in (
        ("queue_capacity", cap),
        ("max_frame_bytes", frame),
        ("history_seconds", hist),
        ("heartbeat_seconds", beat),
    ):
        if v <= 0:
            raise ConfigError(f"{where}.{name}", "must be > 0")
    return hub.HubLimits(
        queue_capacity=cap,
        max_frame_bytes=frame,
        history_seconds=hist,
        heartbeat_seconds=float(beat),
    )


def parse_config(obj: dict) -> HubConfig:
    """Build a HubConfig from parsed JSON, naming the first bad field."""
    if not isinstance(obj, dict):
        raise ConfigError("config", "root must be an object")
    _no_extras(
        obj, {"listen", "admin_token", "seed", "devices", "limits", "replay_settle_ms"}, ""
    )
    listen = _want(obj, "listen", (str,), "", DEFAULT_LISTEN)
    parse_listen(listen)  # fail fast on malformed listen strings
    token = _want(obj, "admin_token", (str,), "", "")
    seed = _want(obj, "seed", (int,), "", 0)
    settle = _want(obj, "replay_settle_ms", (int,), "", 500)
    if settle < 0:
        raise ConfigError("replay_settle_ms", "must be >= 0")
    raw_devices = _want(obj, "devices", (list,), "", [])
    devices = []
    seen_keys: set[tuple[str, str]] = set()
    for i, entry in enumerate(raw_devices):
        where = f"devices[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(where, "expected object")
        _no_extras(entry, {"descriptor", "source", "replay"}, where)
        descriptor = _parse_descriptor(
            _want(entry, "descriptor", (dict,), where), f"{where}.descriptor"
        )
        if descriptor.key in seen_keys:
            raise ConfigError(
                f"{where}.descriptor",
                f"duplicate signal {descriptor.device_id}/{descriptor.signal}",
            )
        seen_keys.add(descriptor.key)
        source = _parse_source(
            _want(entry, "source", (dict,), where), f"{where}.source"
        )
        if source.format == "csv" and len(source.value_columns) != descriptor.channels:
            raise ConfigError(
                f"{where}.source.mapping.value_columns",
                f"{len(source.value_columns)} columns for "
                f"{descriptor.channels} channels",
            )
        replay = _parse_replay(entry.get("replay"), f"{where}.replay")
        devices.append(DeviceConfig(descriptor, source, replay))
    limits = _parse_limits(obj.get("limits"), "limits")
    return HubConfig(
        listen=listen,
        admin_token=token,
        seed=seed,
        devices=tuple(devices),
        limits=limits,
        replay_settle_ms=settle,
    )


def serialize_config(cfg: HubConfig) -> dict:
    """Inverse of parse_config: parse(serialize(cfg)) == cfg."""
    devices = []
    for dev in cfg.devices:
        d = dev.descriptor
        source: dict = {"format": dev.source.format, "path": dev.source.path}
        if dev.source.timestamp_column is not None:
            source["mapping"] = {
                "timestamp_column": dev.source.timestamp_column,
                "value_columns": list(dev.source.value_columns),
                "na_tokens": list(dev.source.na_tokens),
            }
        devices.append(
            {
                "descriptor": {
                    "device_id": d.device_id,
                    "signal": d.signal,
                    "unit": d.unit,
                    "rate_hz": d.rate_hz,
                    "channels": d.channels,
                },
                "source": source,
                "replay": {
                    "speed": dev.replay.speed,
                    "rebase": dev.replay.rebase,
                    "loop": dev.replay.loop,
                },
            }
        )
    return {
        "listen": cfg.listen,
        "admin_token": cfg.admin_token,
        "seed": cfg.seed,
        "devices": devices,
        "limits": {
            "queue_capacity": cfg.limits.queue_capacity,
            "max_frame_bytes": cfg.limits.max_frame_bytes,
            "history_seconds": cfg.limits.history_seconds,
            "heartbeat_seconds": cfg.limits.heartbeat_seconds,
        },
        "replay_settle_ms": cfg.replay_settle_ms,
    }


def load_config(path: str | Path) -> HubConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"malformed JSON: {exc.msg}") from None
    return parse_config(obj)


def load_device_stream(dev: DeviceConfig, base_dir: Path, where: str) -> RecordedStream:
    path = Path(dev.source.path)
    if not path.is_absolute():
        path = base_dir / path
    if not path.exists():
        raise ConfigError(f"{where}.source.path", f"file not found: {path}")
    try:
        if dev.source.format == "csv":
            mapping = CsvMapping(
                timestamp_column=dev.source.timestamp_column or "",
                value_columns=dev.source.value_columns,
                descriptor=dev.descriptor,
                na_tokens=dev.source.na_tokens,
            )
            return load_csv(path, mapping)
        return load_json(path, dev.descriptor)
    except IngestError as exc:
        raise ConfigError(f"{where}.source.path", f"{path}: {exc}") from None


def build_replays(cfg: HubConfig, base_dir: Path) -> tuple[ReplayPlan, ...]:
    plans = []
    for i, dev in enumerate(cfg.devices):
        stream = load_device_stream(dev, base_dir, f"devices[{i}]")
        plans.append(
            ReplayPlan(
                streams=(stream,),
                speed=dev.replay.speed,
                rebase=dev.replay.rebase,
                loop=dev.replay.loop,
            )
        )
    return tuple(plans)


# ── dataset helpers shared by validate / transform ───────────────────


def _infer_format(path: Path, explicit: str | None) -> str:
    if explicit:
        return explicit
    if path.suffix.lower() == ".csv":
        return "csv"
    return "json"


def _read_mapping_arg(text: str) -> dict:
    """--mapping takes inline JSON or a path to a JSON file."""
    candidate = text.strip()
    if candidate.startswith("{"):
        obj = json.loads(candidate)
    else:
        obj = json.loads(Path(text).read_text(encoding="utf-8"))
    if not isinstance(obj, dict):
        raise ValueError("mapping must be a JSON object")
    return obj


def _csv_header(path: Path) -> list[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        row = next(csv.reader(fh), None)
    if not row:
        raise ParseError("empty csv file", line_no=1)
    return row


def _json_channels(path: Path) -> int:
    obj = json.loads(path.read_text(encoding="utf-8"))
    if isinstance(obj, list) and obj and isinstance(obj[0], dict):
        values = obj[0].get("values")
        if isinstance(values, list) and values:
            return len(values)
    return 1


def _load_dataset(
    path: Path, fmt: str, mapping_obj: dict | None
) -> RecordedStream:
    """Load a standalone dataset, inferring a descriptor when none is given."""
    mapping_obj = mapping_obj or {}
    desc_obj = mapping_obj.get("descriptor")
    na_tokens = tuple(mapping_obj.get("na_tokens", DEFAULT_NA_TOKENS))
    if fmt == "csv":
        ts_col = mapping_obj.get("timestamp_column")
        cols = mapping_obj.get("value_columns")
        if ts_col is None or cols is None:
            header = _csv_header(path)
            if len(header) < 2:
                raise ParseError("csv needs a timestamp column plus data columns", 1)
            ts_col = ts_col or header[0]
            cols = cols or [c for c in header if c != ts_col]
        channels = len(cols)
    else:
        channels = _json_channels(path)
    if desc_obj is not None:
        try:
            descriptor = SignalDescriptor(**desc_obj)
        except TypeError as exc:
            raise ParseError(f"mapping descriptor: {exc}") from None
    else:
        descriptor = SignalDescriptor(
            device_id="dataset",
            signal=path.stem or "signal",
            unit="",
            rate_hz=1.0,
            channels=channels,
        )
    validate_descriptor(descriptor)
    if fmt == "csv":
        return load_csv(
            path,
            CsvMapping(
                timestamp_column=ts_col,
                value_columns=tuple(cols),
                descriptor=descriptor,
                na_tokens=na_tokens,
            ),
        )
    return load_json(path, descriptor)


def _parse_pipeline(text: str) -> tuple[TransformSpec, ...]:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise dsp.InvalidPipeline(f"malformed pipeline JSON: {exc.msg}") from None
    if not isinstance(obj, list):
        raise dsp.InvalidPipeline("pipeline must be a JSON array of stages")
    specs = []
    for i, entry in enumerate(obj):
        if not isinstance(entry, dict) or not isinstance(entry.get("kind"), str):
            raise dsp.InvalidPipeline(f"stage {i}: expected {{kind, params}}")
        params = entry.get("params", {})
        if not isinstance(params, dict):
            raise dsp.InvalidPipeline(f"stage {i}: params must be an object")
        specs.append(TransformSpec(kind=entry["kind"], params=params))
    return tuple(specs)


# ── commands ─────────────────────────────────────────────────────────


def cmd_serve(args) -> int:
    config_path = args.config or os.environ.get(CONFIG_ENV)
    if not config_path:
        return _fail(
            EXIT_CONFIG, "config_error", f"config: no --config and no ${CONFIG_ENV}"
        )
    try:
        cfg = load_config(config_path)
        host, port = parse_listen(cfg.listen)
        replays = build_replays(cfg, Path(config_path).resolve().parent)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config_error", exc)

    view = hub.HubConfigView(
        host=host,
        port=port,
        admin_token=cfg.admin_token,
        seed=cfg.seed,
        replays=replays,
        limits=cfg.limits,
        replay_settle_ms=cfg.replay_settle_ms,
    )
    instance = hub.Hub(view)
    try:
        instance.start()
    except hub.BindError as exc:
        return _fail(EXIT_BIND, "bind_error", exc)

    stop = threading.Event()
    dump_stats = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    if hasattr(signal, "SIGUSR1"):
        signal.signal(signal.SIGUSR1, lambda *_: dump_stats.set())
    try:
        while not stop.wait(0.2):
            if dump_stats.is_set():
                dump_stats.clear()
                print(json.dumps(instance.stats(), sort_keys=True), file=sys.stderr)
    except KeyboardInterrupt:
        pass
    instance.shutdown()
    return 0


def cmd_validate(args) -> int:
    path = Path(args.dataset)
    fmt = _infer_format(path, args.format)
    try:
        mapping_obj = _read_mapping_arg(args.mapping) if args.mapping else None
    except (ValueError, OSError) as exc:
        return _fail(1, "parse_error", f"mapping: {exc}")
    try:
        stream = _load_dataset(path, fmt, mapping_obj)
    except DuplicateTimestamp as exc:
        return _fail(1, "duplicate_timestamp", exc)
    except ParseError as exc:
        return _fail(1, "parse_error", exc)
    except (IngestError, ValidationError, OSError, json.JSONDecodeError) as exc:
        return _fail(1, "parse_error", exc)
    rows = len(stream)
    span = stream.timestamps[-1] - stream.timestamps[0] if rows else 0
    rate = (rows - 1) * 1000.0 / span if rows > 1 and span > 0 else 0.0
    print(
        f"rows={rows} missing={stream.missing_count} "
        f"reordered={'true' if stream.reordered else 'false'} "
        f"span_ms={span} rate_hz={rate:.6g}"
    )
    return 0


def cmd_transform(args) -> int:
    path = Path(args.in_path)
    fmt = _infer_format(path, args.format)
    try:
        mapping_obj = _read_mapping_arg(args.mapping) if args.mapping else None
    except (ValueError, OSError) as exc:
        return _fail(1, "parse_error", f"mapping: {exc}")
    try:
        stream = _load_dataset(path, fmt, mapping_obj)
    except ParseError as exc:
        return _fail(1, "parse_error", exc)
    except (IngestError, ValidationError, OSError, json.JSONDecodeError) as exc:
        return _fail(1, "parse_error", exc)
    try:
        specs = _parse_pipeline(args.pipeline)
        d = stream.descriptor
        state = dsp.PipelineState(
            specs,
            d.channels,
            dsp.SeedContext(args.seed, d.device_id, d.signal),
            offline=True,
        )
    except (dsp.InvalidParams, dsp.InvalidPipeline) as exc:
        return _fail(1, "invalid_pipeline", exc)
    out_rows = []
    for s in stream:
        for _, out_s in dsp.apply_pipeline(s, state, now=0):
            out_rows.append(
                {
                    "t": out_s.t,
                    "values": [NA if is_missing(v) else v for v in out_s.values],
                }
            )
    text = json.dumps(out_rows, ensure_ascii=False, separators=(",", ":")) + "\n"
    try:
        Path(args.out).write_text(text, encoding="utf-8")
    except OSError as exc:
        return _fail(1, "io_error", exc)
    print(f"samples={len(out_rows)} out={args.out}")
    return 0


class _LineSocket:
    """Blocking NDJSON client socket for the one-shot commands."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._buf = bytearray()

    def send(self, m: Message) -> None:
        self.sock.sendall(encode_frame(m))

    def read_line(self) -> bytes | None:
        """One raw frame line without its newline; None on EOF."""
        while True:
            nl = self._buf.find(b"\n")
            if nl >= 0:
                line = bytes(self._buf[:nl])
                del self._buf[: nl + 1]
                if line.strip():
                    return line
                continue
            chunk = self.sock.recv(65536)
            if not chunk:
                return None
            self._buf.extend(chunk)

    def read_message(self) -> tuple[bytes, Message] | None:
        while True:
            line = self.read_line()
            if line is None:
                return None
            try:
                return line, decode_frame(line)
            except DecodeError:
                continue  # foreign noise on the line; keep reading

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def _parse_connect(text: str) -> tuple[str, int]:
    host, sep, port_text = text.rpartition(":")
    if not sep or not port_text.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port_text)


def _parse_selection(entries) -> tuple[tuple[str, str], ...]:
    selection = []
    for text in entries:
        device_id, sep, sig = text.partition("/")
        if not sep or not device_id or not sig:
            raise ValueError(f"expected device/signal, got {text!r}")
        selection.append((device_id, sig))
    return tuple(selection)


def cmd_probe(args) -> int:
    try:
        host, port = _parse_connect(args.connect)
        selection = _parse_selection(args.subscribe)
    except ValueError as exc:
        return _fail(1, "connect_error", exc)
    try:
        transforms = _parse_pipeline(args.pipeline) if args.pipeline else ()
    except dsp.InvalidPipeline as exc:
        return _fail(1, "invalid_pipeline", exc)
    try:
        ls = _LineSocket(host, port)
    except OSError as exc:
        return _fail(1, "connect_error", exc)
    try:
        ls.send(Hello(role="client", id=args.id))
        while True:  # catalog first, then the subscribe ack
            got = ls.read_message()
            if got is None:
                return _fail(1, "connect_error", "connection closed during handshake")
            _, msg = got
            if isinstance(msg, Catalog):
                ls.send(Subscribe(selection=selection, transforms=transforms))
                continue
            if isinstance(msg, Ack) and msg.of == "subscribe":
                if not msg.ok:
                    return _fail(1, "subscribe_rejected", msg.detail)
                break
            if isinstance(msg, Error):
                return _fail(1, msg.code, msg.message)

        out = open(args.out, "wb") if args.out else sys.stdout.buffer
        deadline = time.monotonic() + args.duration if args.duration else None
        if deadline is not None:
            ls.sock.settimeout(0.25)
        else:
            ls.sock.settimeout(None)
        written = 0
        try:
            while args.count is None or written < args.count:
                if deadline is not None and time.monotonic() >= deadline:
                    break
                try:
                    got = ls.read_message()
                except socket.timeout:
                    continue
                if got is None:
                    if args.count is not None:
                        return _fail(
                            1,
                            "connect_error",
                            f"stream ended after {written}/{args.count} frames",
                        )
                    break
                line, msg = got
                if isinstance(msg, Data):
                    out.write(line + b"\n")
                    written += 1
                elif isinstance(msg, Error):
                    print(f"{msg.code}: {msg.message}", file=sys.stderr)
        finally:
            out.flush()
            if args.out:
                out.close()
        return 0
    except socket.timeout:
        return _fail(1, "connect_error", "timed out waiting for the hub")
    except OSError as exc:
        return _fail(1, "connect_error", exc)
    finally:
        ls.close()


def cmd_extract(args) -> int:
    if args.t0 > args.t1:
        return _fail(1, "parse_error", "t0 must be <= t1")
    epoch = sync.Epoch(t0=args.t0, t1=args.t1, label=args.label or "")
    out = None
    try:
        out = open(args.out, "wb") if args.out else sys.stdout.buffer
        kept = 0
        with open(args.recording, "rb") as fh:
            for line_no, raw in enumerate(fh, start=1):
                line = raw.rstrip(b"\n")
                if not line.strip():
                    continue
                try:
                    msg = decode_frame(line)
                except DecodeError as exc:
                    return _fail(1, "parse_error", f"line {line_no}: {exc.reason}")
                if not isinstance(msg, Data):
                    continue
                if not epoch.contains(msg.t):
                    continue
                if args.label:
                    out.write(encode_frame(Data.from_sample(msg.to_sample(), args.label)))
                else:
                    out.write(line + b"\n")  # untouched bytes, identity-friendly
                kept += 1
        out.flush()
        print(f"samples={kept}", file=sys.stderr)
        return 0
    except OSError as exc:
        return _fail(1, "io_error", exc)
    finally:
        if args.out and out is not None:
            out.close()


def cmd_stats(args) -> int:
    try:
        host, port = _parse_connect(args.connect)
    except ValueError as exc:
        return _fail(1, "connect_error", exc)
    try:
        ls = _LineSocket(host, port)
    except OSError as exc:
        return _fail(1, "connect_error", exc)
    try:
        ls.send(Hello(role="client", id=f"stats#{args.token}"))
        sent_control = False
        while True:
            got = ls.read_message()
            if got is None:
                return _fail(1, "connect_error", "connection closed")
            _, msg = got
            if isinstance(msg, Catalog) and not sent_control:
                ls.send(Control(action="stats", params={}))
                sent_control = True
            elif isinstance(msg, Ack) and msg.of == "control":
                if not msg.ok:
                    return _fail(1, "stats_rejected", msg.detail)
                print(msg.detail)
                return 0
            elif isinstance(msg, Error):
                return _fail(1, msg.code.lower(), msg.message)
    except socket.timeout:
        return _fail(1, "connect_error", "timed out waiting for the hub")
    except OSError as exc:
        return _fail(1, "connect_error", exc)
    finally:
        ls.close()


# ── argument parsing ─────────────────────────────────────────────────


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thalamus",
        description="Replay recorded sensor datasets as live NDJSON/TCP streams.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the hub")
    p.add_argument("--config", help=f"config path (default ${CONFIG_ENV})")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("validate", help="load a dataset and report on it")
    p.add_argument("--dataset", required=True)
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--mapping", help="inline JSON or a path to a mapping file")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("transform", help="apply a pipeline to a dataset offline")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--mapping")
    p.add_argument("--pipeline", required=True, help="JSON array of stages")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("probe", help="subscribe and record data frames")
    p.add_argument("--connect", required=True, help="host:port")
    p.add_argument(
        "--subscribe",
        action="append",
        required=True,
        metavar="DEVICE/SIGNAL",
    )
    p.add_argument("--pipeline", help="JSON array of stages")
    p.add_argument("--id", default=f"probe-{os.getpid()}")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--count", type=int)
    group.add_argument("--duration", type=float, help="seconds")
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("extract", help="cut an epoch out of a recording")
    p.add_argument("--recording", required=True)
    p.add_argument("--t0", type=int, required=True)
    p.add_argument("--t1", type=int, required=True)
    p.add_argument("--label")
    p.add_argument("--out")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("stats", help="fetch a hub stats snapshot")
    p.add_argument("--connect", required=True, help="host:port")
    p.add_argument("--token", required=True, help="admin token")
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv=None) -> int:
    import logging

    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
