"""The central hub: TCP server, signal catalog, replay pacing, routing, fan-out.

Concurrency layout (all plain threads, one mailbox):

  accept ──┐
  readers ─┤                      ┌─> per-connection outbox ─> writer ─> socket
  replay ──┼─> router (mailbox) ──┤
  timer  ──┘                      └─> delivery timer (delayed frames loop back
                                      through the mailbox)

The router thread owns every piece of routing state -- catalog, sessions,
subscriptions, injections, history -- so nothing here needs fine-grained
locking. Per-subscription outboxes are bounded FIFO queues with drop-oldest
backpressure: a stalled client overflows its own lanes and never delays
anyone else. Protocol frames (acks, catalogs, errors) ride a priority lane
that is never dropped.
"""

from __future__ import annotations

import heapq
import json
import logging
import queue
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace

from . import dsp, sync
from .ingest import ReplayCursor, ReplayPlan, replay_next
from .model import (
    Sample,
    SignalDescriptor,
    Timestamp,
    ValidationError,
    validate_descriptor,
    validate_sample,
)
from .wire import (
    Ack,
    Catalog,
    Control,
    Data,
    DecodeError,
    Error,
    FrameReader,
    FrameTooLarge,
    Hello,
    Message,
    Subscribe,
    encode_frame,
)

logger = logging.getLogger(__name__)

StreamKey = tuple[str, str]


class HubError(Exception):
    pass


class BindError(HubError):
    pass


def wallclock_ms() -> Timestamp:
    return time.time_ns() // 1_000_000


@dataclass(frozen=True)
class HubLimits:
    queue_capacity: int = 1024
    max_frame_bytes: int = 1 << 20
    history_seconds: int = 60
    heartbeat_seconds: float = 30.0


@dataclass(frozen=True)
class HubConfigView:
    """Everything the hub needs to run; the cli module builds this from file.

    Replay pacing starts only once the first subscription lands, plus a
    settle window so a burst of clients connecting together all see the
    stream from its first sample. A hub with no clients idles with its
    catalog available instead of burning the dataset into the void.
    """

    host: str = "0.0.0.0"
    port: int = 7331
    admin_token: str = ""
    seed: int = 0
    replays: tuple[ReplayPlan, ...] = ()
    limits: HubLimits = field(default_factory=HubLimits)
    replay_settle_ms: int = 500


# ── per-connection write side ────────────────────────────────────────


class _Lane:
    __slots__ = ("frames", "drop_count", "enqueued")

    def __init__(self):
        self.frames: deque[bytes] = deque()
        self.drop_count = 0
        self.enqueued = 0


class _Outbox:
    """Write buffers for one connection: a priority lane for protocol frames
    plus one bounded data lane per subscription (drop-oldest on overflow)."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._control: deque[bytes] = deque()
        self._lanes: dict[int, _Lane] = {}
        self.closed = False

    def add_lane(self, sub_id: int) -> None:
        with self._lock:
            self._lanes[sub_id] = _Lane()

    def remove_lane(self, sub_id: int) -> None:
        with self._lock:
            self._lanes.pop(sub_id, None)

    def send_control(self, frame: bytes) -> None:
        with self._cond:
            if self.closed:
                return
            self._control.append(frame)
            self._cond.notify()

    def enqueue_data(self, sub_id: int, frame: bytes) -> None:
        with self._cond:
            lane = self._lanes.get(sub_id)
            if lane is None or self.closed:
                return
            if len(lane.frames) >= self.capacity:
                lane.frames.popleft()  # drop the OLDEST pending frame
                lane.drop_count += 1
            lane.frames.append(frame)
            lane.enqueued += 1
            self._cond.notify()

    def drain(self, timeout: float) -> list[bytes] | None:
        """Block until frames arrive (or timeout); pop everything pending."""
        with self._cond:
            if not self._pending():
                self._cond.wait(timeout)
            if not self._pending():
                return None
            out = list(self._control)
            self._control.clear()
            for sub_id in sorted(self._lanes):
                lane = self._lanes[sub_id]
                out.extend(lane.frames)
                lane.frames.clear()
            return out

    def _pending(self) -> bool:
        return bool(self._control) or any(
            lane.frames for lane in self._lanes.values()
        )

    def is_empty(self) -> bool:
        with self._lock:
            return not self._pending()

    def lane_stats(self) -> dict[int, tuple[int, int, int]]:
        with self._lock:
            return {
                sub_id: (len(lane.frames), lane.drop_count, lane.enqueued)
                for sub_id, lane in self._lanes.items()
            }

    def close(self) -> None:
        with self._cond:
            self.closed = True
            self._cond.notify_all()


# ── routing-side bookkeeping (router thread only) ────────────────────


@dataclass
class _CatalogEntry:
    descriptor: SignalDescriptor
    live: bool = True
    owner: int | None = None  # conn_id for connection-registered signals


@dataclass
class _Injection:
    latency_ms: int = 0
    noise: dsp.NoiseSpec | None = None
    noise_rng: object | None = None


class _Subscription:
    __slots__ = (
        "sub_id",
        "session",
        "selection",
        "stages",
        "states",
        "has_stages",
        "has_buffer_delay",
        "pending",
        "last_deliver_at",
    )

    def __init__(self, sub_id, session, selection, stages):
        self.sub_id: int = sub_id
        self.session: _Session = session
        self.selection: tuple[StreamKey, ...] = selection
        self.stages = stages
        self.states: dict[StreamKey, dsp.PipelineState] = {}
        self.has_stages = bool(stages)
        self.has_buffer_delay = False
        self.pending = 0  # frames parked in the delivery timer
        self.last_deliver_at = 0


class _Session:
    __slots__ = (
        "conn_id",
        "sock",
        "addr",
        "outbox",
        "role",
        "identity",
        "admin",
        "grants",
        "registered",
        "subs",
        "last_rx",
        "reader_thread",
        "writer_thread",
        "closing",
    )

    def __init__(self, conn_id, sock, addr, outbox):
        self.conn_id: int = conn_id
        self.sock: socket.socket = sock
        self.addr = addr
        self.outbox: _Outbox = outbox
        self.role: str | None = None
        self.identity: str = ""
        self.admin = False
        self.grants: set[StreamKey] = set()
        self.registered: list[StreamKey] = []
        self.subs: list[_Subscription] = []
        self.last_rx: float = time.monotonic()
        self.reader_thread: threading.Thread | None = None
        self.writer_thread: threading.Thread | None = None
        self.closing = False

    def send(self, m: Message) -> None:
        self.outbox.send_control(encode_frame(m))


class _DeliveryTimer(threading.Thread):
    """Holds (deliver_at, frame) entries and feeds them back to the router
    mailbox once due. Sequence numbers keep FIFO order for equal deadlines.

    An entry releases only once its due millisecond has fully elapsed: with
    a flooring clock, popping at ``deliver_at <= now`` would let a delayed
    frame out up to 1 ms before its latency target."""

    def __init__(self, mailbox, clock):
        super().__init__(name="hub-timer", daemon=True)
        self._mailbox = mailbox
        self._clock = clock
        self._cond = threading.Condition()
        self._heap: list[tuple[int, int, int, bytes]] = []
        self._seq = 0
        self._stopped = False

    def schedule(self, deliver_at: int, sub_id: int, frame: bytes) -> None:
        with self._cond:
            heapq.heappush(self._heap, (deliver_at, self._seq, sub_id, frame))
            self._seq += 1
            self._cond.notify()

    def stop(self) -> None:
        with self._cond:
            self._stopped = True
            self._cond.notify()

    def run(self) -> None:
        while True:
            with self._cond:
                if self._stopped:
                    return
                if not self._heap:
                    self._cond.wait(0.5)
                    continue
                now = self._clock()
                wait_ms = self._heap[0][0] + 1 - now
                if wait_ms > 0:
                    self._cond.wait(wait_ms / 1000.0)
                    continue
                due: list[tuple[int, int, int, bytes]] = []
                while self._heap and self._heap[0][0] < now:
                    due.append(heapq.heappop(self._heap))
            for _, _, sub_id, frame in due:
                self._mailbox.put(("enqueue", sub_id, frame))


# ── the hub ──────────────────────────────────────────────────────────


class Hub:
    """Threaded hub instance; create, ``start()``, and ``shutdown()``."""

    def __init__(self, config: HubConfigView, clock=wallclock_ms):
        self.config = config
        self.limits = config.limits
        self._clock = clock
        self._mailbox: queue.SimpleQueue = queue.SimpleQueue()
        self._stop = threading.Event()
        self._listener: socket.socket | None = None
        self.port: int | None = None

        # router-thread state
        self._catalog: dict[StreamKey, _CatalogEntry] = {}
        self._sessions: dict[int, _Session] = {}
        self._subs: dict[int, _Subscription] = {}
        self._sub_index: dict[StreamKey, list[_Subscription]] = {}
        self._injections: dict[StreamKey, _Injection] = {}
        self._history: dict[StreamKey, deque[Sample]] = {}
        self._next_conn_id = 1
        self._next_sub_id = 1
        self._frames_routed = 0
        self._samples_discarded = 0
        self._started_at = 0

        self._first_sub = threading.Event()
        self._timer = _DeliveryTimer(self._mailbox, clock)
        self._accept_thread: threading.Thread | None = None
        self._router_thread: threading.Thread | None = None
        self._replay_thread: threading.Thread | None = None

    # ── lifecycle ────────────────────────────────────────────────

    def start(self) -> None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((self.config.host, self.config.port))
        except OSError as exc:
            sock.close()
            raise BindError(
                f"cannot bind {self.config.host}:{self.config.port}: {exc}"
            ) from exc
        sock.listen(64)
        sock.settimeout(0.5)
        self._listener = sock
        self.port = sock.getsockname()[1]
        self._started_at = self._clock()

        for plan in self.config.replays:
            for stream in plan.streams:
                key = stream.descriptor.key
                if key in self._catalog:
                    raise HubError(f"duplicate replay signal {key}")
                self._catalog[key] = _CatalogEntry(stream.descriptor, live=True)

        self._timer.start()
        self._router_thread = threading.Thread(
            target=self._router_loop, name="hub-router", daemon=True
        )
        self._router_thread.start()
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="hub-accept", daemon=True
        )
        self._accept_thread.start()
        if self.config.replays:
            self._replay_thread = threading.Thread(
                target=self._replay_loop, name="hub-replay", daemon=True
            )
            self._replay_thread.start()
        logger.info(
            "event=listening host=%s port=%d signals=%d",
            self.config.host,
            self.port,
            len(self._catalog),
        )

    def shutdown(self, flush_deadline: float = 5.0) -> None:
        """Stop accepting, flush pending frames up to the deadline, tear down."""
        if self._stop.is_set():
            return
        self._stop.set()
        if self._listener is not None:
            self._listener.close()
        if self._replay_thread is not None:
            self._replay_thread.join(timeout=2.0)
        self._mailbox.put(("stop",))
        if self._router_thread is not None:
            self._router_thread.join(timeout=2.0)
        self._timer.stop()
        self._timer.join(timeout=1.0)

        deadline = time.monotonic() + flush_deadline
        sessions = list(self._sessions.values())
        for s in sessions:
            while time.monotonic() < deadline and not s.outbox.is_empty():
                time.sleep(0.01)
            s.outbox.close()
        for s in sessions:
            _close_socket(s.sock)
            for t in (s.reader_thread, s.writer_thread):
                if t is not None:
                    t.join(timeout=1.0)
        logger.info("event=shutdown frames_routed=%d", self._frames_routed)

    def stats(self) -> dict:
        """Consistent snapshot assembled on the router thread."""
        done = threading.Event()
        holder: dict = {}
        self._mailbox.put(("stats", holder, done))
        if not done.wait(timeout=2.0):
            raise HubError("stats request timed out")
        return holder["snapshot"]

    # ── socket-facing threads ────────────────────────────────────

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while not self._stop.is_set():
            try:
                conn, addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._mailbox.put(("conn", conn, addr))

    def _reader_loop(self, session: _Session) -> None:
        reader = FrameReader(self.limits.max_frame_bytes)
        while not self._stop.is_set():
            try:
                chunk = session.sock.recv(65536)
            except OSError:
                break
            if not chunk:
                break
            try:
                msgs = reader.feed(chunk)
            except FrameTooLarge as exc:
                session.send(Error(code="FRAME_TOO_LARGE", message=str(exc)))
                break
            for m in msgs:
                self._mailbox.put(("frame", session, m))
        self._mailbox.put(("eof", session))

    def _writer_loop(self, session: _Session) -> None:
        outbox = session.outbox
        try:
            while True:
                frames = outbox.drain(timeout=0.5)
                if frames is None:
                    if outbox.closed:
                        return
                    continue
                try:
                    session.sock.sendall(b"".join(frames))
                except OSError:
                    return
        finally:
            # the writer owns the close so queued error frames still flush
            _close_socket(session.sock)

    def _replay_loop(self) -> None:
        while not self._first_sub.wait(timeout=0.2):
            if self._stop.is_set():
                return
        if self._stop.wait(self.config.replay_settle_ms / 1000.0):
            return
        cursors = [ReplayCursor(plan) for plan in self.config.replays]
        peeks: list[tuple[int, Sample] | None] = [None] * len(cursors)
        done = [False] * len(cursors)
        while not self._stop.is_set():
            for i, plan in enumerate(self.config.replays):
                if peeks[i] is None and not done[i]:
                    nxt = replay_next(plan, cursors[i], self._clock())
                    if nxt is None:
                        done[i] = True
                    else:
                        peeks[i] = nxt
            candidates = [(p[0], i) for i, p in enumerate(peeks) if p is not None]
            if not candidates:
                logger.info("event=replay_exhausted")
                return
            due, idx = min(candidates)
            while (wait_ms := due - self._clock()) > 0:
                if self._stop.wait(wait_ms / 1000.0):
                    return
            _, sample = peeks[idx]  # type: ignore[misc]
            peeks[idx] = None
            self._mailbox.put(("sample", sample))

    # ── router thread ────────────────────────────────────────────

    def _router_loop(self) -> None:
        hk_interval = 0.02  # drives buffer-window flushes and heartbeat
        hb_interval = min(5.0, max(0.1, self.limits.heartbeat_seconds / 2.0))
        next_hk = time.monotonic() + hk_interval
        next_heartbeat = time.monotonic() + hb_interval
        while True:
            timeout = max(0.0, next_hk - time.monotonic())
            try:
                event = self._mailbox.get(timeout=timeout)
            except queue.Empty:
                event = None
            if event is not None:
                kind = event[0]
                if kind == "stop":
                    return
                try:
                    self._dispatch(event)
                except Exception:
                    logger.exception("event=router_error kind=%s", kind)
            now_mono = time.monotonic()
            if now_mono >= next_hk:
                next_hk = now_mono + hk_interval
                self._poll_buffer_delays()
                if now_mono >= next_heartbeat:
                    next_heartbeat = now_mono + hb_interval
                    self._reap_idle()

    def _dispatch(self, event: tuple) -> None:
        kind = event[0]
        if kind == "sample":
            self._route(event[1], self._clock())
        elif kind == "enqueue":
            sub = self._subs.get(event[1])
            if sub is not None:
                sub.pending -= 1
                self._enqueue(sub, event[2])
        elif kind == "frame":
            self._on_frame(event[1], event[2])
        elif kind == "conn":
            self._on_conn(event[1], event[2])
        elif kind == "eof":
            self._on_eof(event[1])
        elif kind == "stats":
            event[1]["snapshot"] = self._snapshot()
            event[2].set()

    # ── connection events ────────────────────────────────────────

    def _on_conn(self, conn: socket.socket, addr) -> None:
        session = _Session(
            self._next_conn_id, conn, addr, _Outbox(self.limits.queue_capacity)
        )
        self._next_conn_id += 1
        self._sessions[session.conn_id] = session
        session.reader_thread = threading.Thread(
            target=self._reader_loop,
            args=(session,),
            name=f"hub-read-{session.conn_id}",
            daemon=True,
        )
        session.writer_thread = threading.Thread(
            target=self._writer_loop,
            args=(session,),
            name=f"hub-write-{session.conn_id}",
            daemon=True,
        )
        session.reader_thread.start()
        session.writer_thread.start()
        logger.info("event=connected conn=%d addr=%s", session.conn_id, addr)

    def _on_eof(self, session: _Session) -> None:
        if session.conn_id not in self._sessions:
            return
        del self._sessions[session.conn_id]
        for sub in session.subs:
            self._drop_subscription(sub)
        dropped_any = False
        for key in session.registered:
            entry = self._catalog.get(key)
            if entry is not None and entry.owner == session.conn_id and entry.live:
                entry.live = False
                dropped_any = True
        if dropped_any:
            self._broadcast_catalog()
        session.outbox.close()
        logger.info(
            "event=disconnected conn=%d identity=%s", session.conn_id, session.identity
        )

    def _drop_subscription(self, sub: _Subscription) -> None:
        self._subs.pop(sub.sub_id, None)
        sub.session.outbox.remove_lane(sub.sub_id)
        for key in sub.selection:
            lst = self._sub_index.get(key)
            if lst and sub in lst:
                lst.remove(sub)

    # ── frame handling ───────────────────────────────────────────

    def _on_frame(self, session: _Session, m: Message | DecodeError) -> None:
        if session.conn_id not in self._sessions:
            return  # raced with teardown
        session.last_rx = time.monotonic()
        if isinstance(m, DecodeError):
            session.send(Error(code="DECODE", message=m.reason))
            return
        if session.role is None and not isinstance(m, Hello):
            session.send(Error(code="PROTOCOL", message="first frame must be hello"))
            self._close_session(session)
            return
        if isinstance(m, Hello):
            self._on_hello(session, m)
        elif isinstance(m, Subscribe):
            self._on_subscribe(session, m)
        elif isinstance(m, Data):
            self._on_publish(session, m)
        elif isinstance(m, Control):
            self._on_control(session, m)
        # acks/catalogs/errors from peers are informational; ignore

    def _on_hello(self, session: _Session, m: Hello) -> None:
        if m.role == "client":
            if session.role is None:
                session.role = "client"
            identity = m.id
            token = self.config.admin_token
            if token and identity.endswith(f"#{token}"):
                session.admin = True
                identity = identity[: -(len(token) + 1)]
            session.identity = session.identity or identity
            session.send(Catalog(signals=self._live_signals()))
            logger.info(
                "event=hello role=client conn=%d identity=%s admin=%s",
                session.conn_id,
                identity,
                session.admin,
            )
            return

        # device-style hello: registration, also the loopback grant path
        try:
            for d in m.signals:
                validate_descriptor(d)
        except ValidationError as exc:
            session.send(Error(code="BAD_DESCRIPTOR", message=str(exc)))
            return
        # atomic: check every descriptor before touching the catalog
        for d in m.signals:
            entry = self._catalog.get(d.key)
            if entry is None:
                continue
            if entry.live:
                session.send(
                    Error(code="DUP_SIGNAL", message=f"{d.device_id}/{d.signal}")
                )
                return
            if entry.descriptor.channels != d.channels:
                session.send(
                    Error(
                        code="INCOMPATIBLE",
                        message=f"{d.device_id}/{d.signal}: channel count changed",
                    )
                )
                return
        if session.role is None:
            session.role = "device"
        session.identity = session.identity or m.id
        for d in m.signals:
            self._catalog[d.key] = _CatalogEntry(
                d, live=True, owner=session.conn_id
            )
            session.grants.add(d.key)
            if d.key not in session.registered:
                session.registered.append(d.key)
        session.send(Ack(of="hello", ok=True, detail=f"registered={len(m.signals)}"))
        if m.signals:
            self._broadcast_catalog()
        logger.info(
            "event=hello role=device conn=%d identity=%s signals=%d",
            session.conn_id,
            m.id,
            len(m.signals),
        )

    def _on_subscribe(self, session: _Session, m: Subscribe) -> None:
        if session.role != "client":
            session.send(Error(code="PROTOCOL", message="only clients subscribe"))
            return
        for key in m.selection:
            if key not in self._catalog:
                session.send(
                    Ack(
                        of="subscribe",
                        ok=False,
                        detail=f"UNKNOWN_SIGNAL {key[0]}/{key[1]}",
                    )
                )
                return
        try:
            parsed = dsp.validate_pipeline(m.transforms)
        except (dsp.InvalidParams, dsp.InvalidPipeline) as exc:
            session.send(
                Ack(of="subscribe", ok=False, detail=f"INVALID_PIPELINE {exc}")
            )
            return

        sub = _Subscription(self._next_sub_id, session, m.selection, m.transforms)
        self._next_sub_id += 1
        sub.has_buffer_delay = any(
            isinstance(p, dsp.DelaySpec) and p.mode == "buffer_window"
            for p in parsed
        )
        for key in m.selection:
            channels = self._catalog[key].descriptor.channels
            sub.states[key] = dsp.PipelineState(
                m.transforms,
                channels,
                dsp.SeedContext(self.config.seed, key[0], key[1]),
            )
            self._sub_index.setdefault(key, []).append(sub)
        session.subs.append(sub)
        self._subs[sub.sub_id] = sub
        session.outbox.add_lane(sub.sub_id)
        session.send(
            Ack(of="subscribe", ok=True, detail=f"signals={len(m.selection)}")
        )
        self._first_sub.set()
        logger.info(
            "event=subscribed conn=%d sub=%d signals=%d stages=%d",
            session.conn_id,
            sub.sub_id,
            len(m.selection),
            len(m.transforms),
        )

    def _on_publish(self, session: _Session, m: Data) -> None:
        key = (m.device_id, m.signal)
        if key not in session.grants:
            session.send(Error(code="NO_GRANT", message=f"{key[0]}/{key[1]}"))
            return
        entry = self._catalog.get(key)
        if entry is None:
            session.send(Error(code="NO_GRANT", message=f"{key[0]}/{key[1]}"))
            return
        sample = m.to_sample()
        try:
            validate_sample(sample, channels=entry.descriptor.channels)
        except ValidationError as exc:
            session.send(Error(code="BAD_SAMPLE", message=str(exc)))
            return
        self._route(sample, self._clock())

    def _on_control(self, session: _Session, m: Control) -> None:
        if not session.admin:
            session.send(Error(code="UNAUTHORIZED", message="admin token required"))
            return
        handler = {
            "inject_delay": self._ctl_inject_delay,
            "inject_noise": self._ctl_inject_noise,
            "drop_device": self._ctl_drop_device,
            "resume_device": self._ctl_resume_device,
            "extract_epoch": self._ctl_extract_epoch,
            "stats": self._ctl_stats,
        }.get(m.action)
        if handler is None:
            session.send(
                Ack(of="control", ok=False, detail=f"UNKNOWN_ACTION {m.action}")
            )
            return
        handler(session, m.params)

    # ── control actions ──────────────────────────────────────────

    def _target_key(self, session, params) -> StreamKey | None:
        key = (params.get("device_id"), params.get("signal"))
        if not all(isinstance(p, str) for p in key) or key not in self._catalog:
            session.send(
                Ack(of="control", ok=False, detail=f"UNKNOWN_TARGET {key[0]}/{key[1]}")
            )
            return None
        return key  # type: ignore[return-value]

    def _ctl_inject_delay(self, session, params) -> None:
        key = self._target_key(session, params)
        if key is None:
            return
        latency = params.get("latency_ms")
        if isinstance(latency, bool) or not isinstance(latency, int) or latency < 0:
            session.send(Ack(of="control", ok=False, detail="BAD_PARAMS latency_ms"))
            return
        self._injections.setdefault(key, _Injection()).latency_ms = latency
        session.send(Ack(of="control", ok=True, detail=f"inject_delay={latency}"))
        logger.info("event=inject_delay key=%s/%s ms=%d", key[0], key[1], latency)

    def _ctl_inject_noise(self, session, params) -> None:
        key = self._target_key(session, params)
        if key is None:
            return
        try:
            spec = dsp.NoiseSpec(
                kind=params.get("kind"),
                amplitude=params.get("amplitude"),
                seed=params.get("seed"),
            )
        except dsp.InvalidParams as exc:
            session.send(Ack(of="control", ok=False, detail=f"BAD_PARAMS {exc}"))
            return
        inj = self._injections.setdefault(key, _Injection())
        inj.noise = spec
        inj.noise_rng = dsp.make_rng(
            dsp.derive_seed(self.config.seed, key[0], key[1], "inject", spec.seed)
        )
        session.send(Ack(of="control", ok=True, detail=f"inject_noise={spec.kind}"))
        logger.info("event=inject_noise key=%s/%s kind=%s", key[0], key[1], spec.kind)

    def _set_device_liveness(self, session, params, live: bool) -> None:
        device_id = params.get("device_id")
        entries = [
            e
            for (dev, _), e in self._catalog.items()
            if dev == device_id
        ]
        if not entries:
            session.send(
                Ack(of="control", ok=False, detail=f"UNKNOWN_TARGET {device_id}")
            )
            return
        for e in entries:
            e.live = live
        self._broadcast_catalog()
        verb = "resumed" if live else "dropped"
        session.send(Ack(of="control", ok=True, detail=f"{verb}={device_id}"))
        logger.info("event=%s device=%s", verb, device_id)

    def _ctl_drop_device(self, session, params) -> None:
        self._set_device_liveness(session, params, live=False)

    def _ctl_resume_device(self, session, params) -> None:
        self._set_device_liveness(session, params, live=True)

    def _ctl_extract_epoch(self, session, params) -> None:
        key = self._target_key(session, params)
        if key is None:
            return
        t0, t1 = params.get("t0"), params.get("t1")
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in (t0, t1)):
            session.send(Ack(of="control", ok=False, detail="BAD_PARAMS t0/t1"))
            return
        if t0 > t1:
            session.send(Ack(of="control", ok=False, detail="BAD_PARAMS t0 > t1"))
            return
        label = params.get("label", "")
        if not isinstance(label, str):
            session.send(Ack(of="control", ok=False, detail="BAD_PARAMS label"))
            return
        snapshot = list(self._history.get(key, ()))
        epoch = sync.Epoch(t0=t0, t1=t1, label=label)
        extracted = sync.extract_epoch(snapshot, epoch)
        session.send(Ack(of="control", ok=True, detail=f"samples={len(extracted)}"))
        for s in extracted:
            session.outbox.send_control(encode_frame(Data.from_sample(s, label=label)))

    def _ctl_stats(self, session, params) -> None:
        session.send(
            Ack(
                of="control",
                ok=True,
                detail=json.dumps(self._snapshot(), sort_keys=True),
            )
        )

    # ── routing core ─────────────────────────────────────────────

    def _route(self, sample: Sample, now: Timestamp) -> None:
        entry = self._catalog.get(sample.key)
        if entry is None or not entry.live:
            self._samples_discarded += 1
            return
        inj = self._injections.get(sample.key)
        if inj is not None and inj.noise is not None:
            # hub-side injected noise: applied once, shared by every subscriber
            sample = replace(
                sample,
                values=tuple(
                    dsp.add_noise(v, inj.noise, inj.noise_rng)
                    for v in sample.values
                ),
            )
        extra_latency = inj.latency_ms if inj is not None else 0

        history = self._history.get(sample.key)
        if history is None:
            history = self._history[sample.key] = deque()
        history.append(sample)
        horizon = sample.t - self.limits.history_seconds * 1000
        while history and history[0].t < horizon:
            history.popleft()

        subs = self._sub_index.get(sample.key)
        if not subs:
            return
        base_frame: bytes | None = None
        for sub in subs:
            if sub.has_stages:
                outputs = dsp.apply_pipeline(sample, sub.states[sample.key], now)
                for deliver_at, out_sample in outputs:
                    frame = encode_frame(Data.from_sample(out_sample))
                    self._deliver(sub, deliver_at + extra_latency, frame, now)
            else:
                if base_frame is None:
                    base_frame = encode_frame(Data.from_sample(sample))
                self._deliver(sub, now + extra_latency, base_frame, now)

    def _deliver(self, sub: _Subscription, deliver_at: int, frame: bytes, now: int) -> None:
        # monotone deliver_at per subscription keeps the FIFO invariant even
        # when an injected latency is changed at runtime
        if deliver_at < sub.last_deliver_at:
            deliver_at = sub.last_deliver_at
        sub.last_deliver_at = deliver_at
        if deliver_at <= now and sub.pending == 0:
            self._enqueue(sub, frame)
        else:
            sub.pending += 1
            self._timer.schedule(deliver_at, sub.sub_id, frame)

    def _enqueue(self, sub: _Subscription, frame: bytes) -> None:
        sub.session.outbox.enqueue_data(sub.sub_id, frame)
        self._frames_routed += 1

    def _poll_buffer_delays(self) -> None:
        now = self._clock()
        for sub in self._subs.values():
            if not sub.has_buffer_delay:
                continue
            for key, state in sub.states.items():
                inj = self._injections.get(key)
                extra = inj.latency_ms if inj is not None else 0
                for deliver_at, out_sample in dsp.pipeline_poll(state, now):
                    frame = encode_frame(Data.from_sample(out_sample))
                    self._deliver(sub, deliver_at + extra, frame, now)

    # ── misc ─────────────────────────────────────────────────────

    def _live_signals(self) -> tuple[SignalDescriptor, ...]:
        return tuple(
            e.descriptor
            for _, e in sorted(self._catalog.items())
            if e.live
        )

    def _broadcast_catalog(self) -> None:
        frame = encode_frame(Catalog(signals=self._live_signals()))
        for session in self._sessions.values():
            if session.role == "client":
                session.outbox.send_control(frame)

    def _close_session(self, session: _Session) -> None:
        session.closing = True
        # closing the outbox lets the writer flush queued frames first; its
        # socket close then wakes the reader, which posts the eof cleanup
        session.outbox.close()

    def _reap_idle(self) -> None:
        cutoff = time.monotonic() - self.limits.heartbeat_seconds
        for session in list(self._sessions.values()):
            if session.subs or session.closing:
                continue  # data flow to a subscriber is implicit liveness
            if session.last_rx < cutoff:
                logger.info("event=heartbeat_close conn=%d", session.conn_id)
                self._close_session(session)

    def _snapshot(self) -> dict:
        sessions = []
        drop_total = 0
        for session in self._sessions.values():
            lanes = session.outbox.lane_stats()
            subs = []
            for sub in session.subs:
                depth, drops, enq = lanes.get(sub.sub_id, (0, 0, 0))
                drop_total += drops
                subs.append(
                    {
                        "sub_id": sub.sub_id,
                        "queue_depth": depth,
                        "drop_count": drops,
                        "frames_enqueued": enq,
                    }
                )
            sessions.append(
                {
                    "conn_id": session.conn_id,
                    "identity": session.identity,
                    "role": session.role or "pending",
                    "admin": session.admin,
                    "subscriptions": subs,
                }
            )
        return {
            "uptime_ms": self._clock() - self._started_at,
            "catalog_size": len(self._catalog),
            "live_signals": sum(1 for e in self._catalog.values() if e.live),
            "frames_routed": self._frames_routed,
            "samples_discarded": self._samples_discarded,
            "drop_total": drop_total,
            "sessions": sessions,
        }


def _close_socket(sock: socket.socket) -> None:
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    try:
        sock.close()
    except OSError:
        pass
