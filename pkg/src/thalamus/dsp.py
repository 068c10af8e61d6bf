"""Streaming signal transforms composable into per-subscription pipelines.

Five stage kinds: missing-value policy, Savitzky-Golay smoothing, scalar
Kalman smoothing, seeded noise injection, and delivery-delay simulation.
Value stages map per channel; a delay stage, if present, must be the last
stage and owns delivery timing instead of values.

The Savitzky-Golay filter runs centered: the output for a window's center
sample emerges once the whole window has arrived, so the stream lags by
(window-1)/2 samples and each output carries the center sample's timestamp.
Windows containing a MISSING channel value yield MISSING for that channel
rather than a partial fit.
"""

from __future__ import annotations

import hashlib
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import (
    MISSING,
    Sample,
    SampleValue,
    Timestamp,
    TransformSpec,
    is_missing,
)


class InvalidParams(ValueError):
    """A TransformSpec's params violate its kind's schema."""


class InvalidPipeline(ValueError):
    """Stage composition rules violated (delay not last, duplicate delay)."""


# ── parameter schemas ────────────────────────────────────────────────


@dataclass(frozen=True)
class MissingPolicy:
    mode: str  # passthrough | zero_fill | hold_last

    MODES = ("passthrough", "zero_fill", "hold_last")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise InvalidParams(f"missing_policy.mode: unknown mode {self.mode!r}")


@dataclass(frozen=True)
class SavGolParams:
    window: int
    order: int

    def __post_init__(self):
        if isinstance(self.window, bool) or not isinstance(self.window, int):
            raise InvalidParams("savgol.window: must be an integer")
        if isinstance(self.order, bool) or not isinstance(self.order, int):
            raise InvalidParams("savgol.order: must be an integer")
        if self.window < 3 or self.window % 2 == 0:
            raise InvalidParams("savgol.window: must be odd and >= 3")
        if self.order < 0:
            raise InvalidParams("savgol.order: must be >= 0")
        if self.order >= self.window:
            raise InvalidParams("savgol.order: must be < window")

    @property
    def half(self) -> int:
        return (self.window - 1) // 2


@dataclass(frozen=True)
class KalmanParams:
    q: float
    r: float
    x0: float = 0.0
    p0: float = 1.0

    def __post_init__(self):
        for name in ("q", "r", "x0", "p0"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise InvalidParams(f"kalman.{name}: must be a number")
        if self.q < 0 or self.r < 0:
            raise InvalidParams("kalman.q/r: must be >= 0")
        if self.q == 0 and self.r == 0:
            raise InvalidParams("kalman.q/r: must not both be 0")
        if self.p0 <= 0:
            raise InvalidParams("kalman.p0: must be > 0")


@dataclass(frozen=True)
class NoiseSpec:
    kind: str  # constant | uniform | gaussian
    amplitude: float
    seed: int | None = None

    KINDS = ("constant", "uniform", "gaussian")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise InvalidParams(f"noise.kind: unknown kind {self.kind!r}")
        amp = self.amplitude
        if isinstance(amp, bool) or not isinstance(amp, (int, float)):
            raise InvalidParams("noise.amplitude: must be a number")
        if self.kind in ("uniform", "gaussian") and amp < 0:
            raise InvalidParams("noise.amplitude: must be >= 0")
        if self.seed is not None and (
            isinstance(self.seed, bool) or not isinstance(self.seed, int)
        ):
            raise InvalidParams("noise.seed: must be an integer")


@dataclass(frozen=True)
class DelaySpec:
    mode: str  # fixed_latency | buffer_window
    latency_ms: int | None = None
    window_ms: int | None = None

    def __post_init__(self):
        if self.mode == "fixed_latency":
            v = self.latency_ms
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise InvalidParams("delay.latency_ms: must be an integer >= 0")
        elif self.mode == "buffer_window":
            v = self.window_ms
            if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
                raise InvalidParams("delay.window_ms: must be an integer > 0")
        else:
            raise InvalidParams(f"delay.mode: unknown mode {self.mode!r}")


StageParams = MissingPolicy | SavGolParams | KalmanParams | NoiseSpec | DelaySpec

_SCHEMA_KEYS = {
    "missing_policy": {"mode"},
    "savgol": {"window", "order"},
    "kalman": {"q", "r", "x0", "p0"},
    "noise": {"kind", "amplitude", "seed"},
    "delay": {"mode", "latency_ms", "window_ms"},
}


def parse_transform(spec: TransformSpec) -> StageParams:
    """Validate a TransformSpec's params against its kind's schema."""
    allowed = _SCHEMA_KEYS.get(spec.kind)
    if allowed is None:
        raise InvalidParams(f"unknown transform kind {spec.kind!r}")
    extra = set(spec.params) - allowed
    if extra:
        raise InvalidParams(f"{spec.kind}: unknown params {sorted(extra)}")
    p = spec.params
    try:
        if spec.kind == "missing_policy":
            return MissingPolicy(mode=p["mode"])
        if spec.kind == "savgol":
            return SavGolParams(window=p["window"], order=p["order"])
        if spec.kind == "kalman":
            return KalmanParams(
                q=p["q"], r=p["r"], x0=p.get("x0", 0.0), p0=p.get("p0", 1.0)
            )
        if spec.kind == "noise":
            return NoiseSpec(
                kind=p["kind"], amplitude=p["amplitude"], seed=p.get("seed")
            )
        return DelaySpec(
            mode=p["mode"],
            latency_ms=p.get("latency_ms"),
            window_ms=p.get("window_ms"),
        )
    except KeyError as exc:
        raise InvalidParams(f"{spec.kind}: missing param {exc.args[0]!r}") from exc


def validate_pipeline(
    stages: Sequence[TransformSpec], offline: bool = False
) -> list[StageParams]:
    """Parse a stage list and enforce composition rules.

    A delay stage must be terminal and unique; offline application (batch
    transform of a dataset) rejects delay altogether since delivery timing is
    meaningless there.
    """
    parsed = [parse_transform(s) for s in stages]
    for i, p in enumerate(parsed):
        if isinstance(p, DelaySpec):
            if offline:
                raise InvalidPipeline("delay stage is not allowed offline")
            if i != len(parsed) - 1:
                raise InvalidPipeline("delay stage must be last")
            if any(isinstance(q, DelaySpec) for q in parsed[:i]):
                raise InvalidPipeline("duplicate delay stage")
    return parsed


# ── missing-value policy ─────────────────────────────────────────────


class HoldState:
    """Per-channel memory of the last non-missing value."""

    __slots__ = ("last",)

    def __init__(self):
        self.last: SampleValue = MISSING

    def __repr__(self):
        return f"HoldState(last={self.last!r})"


def apply_missing_policy(
    v: SampleValue, policy: MissingPolicy, state: HoldState | None = None
) -> SampleValue:
    if policy.mode == "passthrough":
        return v
    if policy.mode == "zero_fill":
        return 0.0 if is_missing(v) else v
    # hold_last
    assert state is not None, "hold_last needs per-channel state"
    if is_missing(v):
        return state.last
    state.last = v
    return v


# ── Savitzky-Golay ───────────────────────────────────────────────────

PENDING = object()  # savgol warm-up marker; never leaves this module's callers


def savgol_coefficients(p: SavGolParams) -> tuple[float, ...]:
    """Weights of the least-squares polynomial smoother at the window center.

    Fits a degree-``order`` polynomial to the window points at abscissae
    -h..+h and returns the linear functional evaluating the fit at 0. The
    first row of the design matrix's pseudo-inverse is exactly that
    functional; weights are symmetric and sum to 1. Columns are equilibrated
    before inverting: monomial columns differ in norm by orders of magnitude,
    and the rescaling keeps every weight accurate to ~1e-15 even at window 21.
    """
    h = p.half
    x = np.arange(-h, h + 1, dtype=float)
    design = np.vander(x, p.order + 1, increasing=True)
    norms = np.linalg.norm(design, axis=0)
    weights = np.linalg.pinv(design / norms)[0] / norms[0]
    return tuple(float(w) for w in weights)


class SavGolChannel:
    """Streaming state for one channel: ring buffer of the last window values."""

    __slots__ = ("buf",)

    def __init__(self, window: int):
        self.buf: deque[SampleValue] = deque(maxlen=window)


def savgol_apply(x: SampleValue, p: SavGolParams, state: SavGolChannel):
    """Push one value; return the smoothed center value, MISSING, or PENDING.

    PENDING until the first full window has arrived; thereafter one output per
    input, lagging ``p.half`` samples. Any MISSING inside the current window
    invalidates its center.
    """
    state.buf.append(x)
    if len(state.buf) < p.window:
        return PENDING
    if any(is_missing(v) for v in state.buf):
        return MISSING
    coeffs = _coeff_cache(p)
    return float(sum(w * v for w, v in zip(coeffs, state.buf)))


_COEFFS: dict[SavGolParams, tuple[float, ...]] = {}


def _coeff_cache(p: SavGolParams) -> tuple[float, ...]:
    c = _COEFFS.get(p)
    if c is None:
        c = _COEFFS[p] = savgol_coefficients(p)
    return c


# ── scalar Kalman ────────────────────────────────────────────────────


class KalmanState:
    """Constant-state (random walk) scalar filter state: estimate and variance."""

    __slots__ = ("x", "p")

    def __init__(self, params: KalmanParams):
        self.x = float(params.x0)
        self.p = float(params.p0)


def kalman_step(state: KalmanState, z: SampleValue, params: KalmanParams) -> float:
    """One predict/update cycle; returns the new estimate.

    MISSING measurements run the predict step only (variance grows by q) and
    emit the prior estimate unchanged.
    """
    state.p += params.q
    if is_missing(z):
        return state.x
    k = state.p / (state.p + params.r)
    state.x += k * (z - state.x)
    state.p *= 1.0 - k
    return state.x


# ── noise ────────────────────────────────────────────────────────────


def derive_seed(
    base_seed: int | None,
    device_id: str,
    signal: str,
    stage_index: int | str,
    explicit: int | None = None,
) -> int:
    """Stable 64-bit stage seed from (seed, device, signal, stage index).

    Hash-based so it is reproducible across processes and platforms; an
    explicit per-stage seed (noise.seed) replaces the hub-global one.
    """
    root = explicit if explicit is not None else (base_seed or 0)
    material = f"{root}|{device_id}|{signal}|{stage_index}"
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def make_rng(seed: int) -> random.Random:
    return random.Random(seed)


def add_noise(v: SampleValue, spec: NoiseSpec, rng: random.Random) -> SampleValue:
    """Additive noise on numbers; MISSING passes through untouched."""
    if is_missing(v):
        return v
    if spec.kind == "constant":
        return v + spec.amplitude
    if spec.kind == "uniform":
        return v + rng.uniform(-spec.amplitude, spec.amplitude)
    return v + rng.gauss(0.0, spec.amplitude)


# ── delay ────────────────────────────────────────────────────────────


class DelayState:
    """Buffer-window accumulator; fixed-latency mode is stateless."""

    __slots__ = ("window_open", "held")

    def __init__(self):
        self.window_open: int | None = None
        self.held: list[Sample] = []


def delay_admit(
    s: Sample, spec: DelaySpec, now: Timestamp, state: DelayState
) -> list[tuple[Timestamp, Sample]]:
    """Admit one sample; return (deliver_at, sample) entries released by it.

    fixed_latency releases the sample itself at now + latency_ms, embedded
    timestamp untouched (this models transport lag, not a clock shift).
    buffer_window accumulates; an arrival at or past the window boundary first
    flushes the held batch at ``now``, then seeds the next window.
    """
    if spec.mode == "fixed_latency":
        return [(now + (spec.latency_ms or 0), s)]
    out = delay_poll(spec, now, state)
    if state.window_open is None:
        state.window_open = now
    state.held.append(s)
    return out


def delay_poll(
    spec: DelaySpec, now: Timestamp, state: DelayState
) -> list[tuple[Timestamp, Sample]]:
    """Timer-driven flush: release the held batch once its window has elapsed.

    Lets a live hub flush a buffer window even when no further samples arrive.
    No-op for fixed_latency.
    """
    if spec.mode != "buffer_window" or state.window_open is None:
        return []
    if now < state.window_open + (spec.window_ms or 0):
        return []
    out = [(now, held) for held in state.held]
    state.held = []
    state.window_open = None
    return out


# ── pipeline composition ─────────────────────────────────────────────


@dataclass
class SeedContext:
    """Identifies the stream a pipeline is bound to, for RNG derivation."""

    base_seed: int = 0
    device_id: str = ""
    signal: str = ""


class PipelineState:
    """All mutable state for one subscription's pipeline over one stream.

    Single-owner: never share an instance across subscriptions. Stage state is
    per channel for value transforms; the optional trailing delay stage holds
    its own queue.
    """

    def __init__(
        self,
        stages: Sequence[TransformSpec],
        channels: int,
        seed_ctx: SeedContext | None = None,
        offline: bool = False,
    ):
        if channels < 1:
            raise InvalidPipeline("channels must be >= 1")
        ctx = seed_ctx or SeedContext()
        self.channels = channels
        self.parsed = validate_pipeline(stages, offline=offline)
        self.delay: DelaySpec | None = None
        self.delay_state = DelayState()
        self.value_stages: list[tuple[StageParams, object]] = []
        for idx, params in enumerate(self.parsed):
            if isinstance(params, DelaySpec):
                self.delay = params
                continue
            if isinstance(params, MissingPolicy):
                state = [HoldState() for _ in range(channels)]
            elif isinstance(params, SavGolParams):
                state = {
                    "channels": [SavGolChannel(params.window) for _ in range(channels)],
                    "timestamps": deque(maxlen=params.window),
                }
            elif isinstance(params, KalmanParams):
                state = [KalmanState(params) for _ in range(channels)]
            elif isinstance(params, NoiseSpec):
                seed = derive_seed(
                    ctx.base_seed, ctx.device_id, ctx.signal, idx, params.seed
                )
                state = make_rng(seed)
            else:  # pragma: no cover - parse_transform is exhaustive
                raise AssertionError(params)
            self.value_stages.append((params, state))


def apply_pipeline(
    s: Sample,
    state: PipelineState,
    now: Timestamp,
) -> list[tuple[Timestamp, Sample]]:
    """Run one sample through the pipeline; return (deliver_at, sample) pairs.

    Value stages apply in declared order per channel. A pending Savitzky-Golay
    warm-up yields an empty list. Without a delay stage every output is due
    immediately (deliver_at = now).
    """
    values: list[SampleValue] = list(s.values)
    t = s.t
    for params, st in state.value_stages:
        if isinstance(params, MissingPolicy):
            if params.mode == "hold_last":
                values = [
                    apply_missing_policy(v, params, st[i])
                    for i, v in enumerate(values)
                ]
            else:
                values = [apply_missing_policy(v, params) for v in values]
        elif isinstance(params, SavGolParams):
            ts: deque = st["timestamps"]
            ts.append(t)
            outs = [
                savgol_apply(v, params, st["channels"][i])
                for i, v in enumerate(values)
            ]
            if any(o is PENDING for o in outs):
                return []
            values = outs  # type: ignore[assignment]
            t = ts[params.half]  # center timestamp of the full window
        elif isinstance(params, KalmanParams):
            values = [kalman_step(st[i], v, params) for i, v in enumerate(values)]
        else:  # NoiseSpec
            values = [add_noise(v, params, st) for v in values]
    out = Sample(s.device_id, s.signal, t, tuple(values))
    if state.delay is not None:
        return delay_admit(out, state.delay, now, state.delay_state)
    return [(now, out)]


def pipeline_poll(
    state: PipelineState, now: Timestamp
) -> list[tuple[Timestamp, Sample]]:
    """Flush a trailing buffer-window delay stage on a timer tick."""
    if state.delay is None:
        return []
    return delay_poll(state.delay, now, state.delay_state)
