"""Client sessions: connect, browse the catalog, subscribe, publish.

One background reader thread per session decodes frames and delivers
callbacks sequentially, in wire order, exactly once per subscription. User
code runs inside that thread, so a slow callback slows this client only
(the hub's per-subscription queue absorbs or drops the backlog). Callback
exceptions are logged and swallowed: user code must not poison the session.

The SDK applies no signal processing of its own. Pipelines run hub-side,
declared at subscribe time, so every subscriber gets the hub's one
authoritative version of a transformed stream.

Reconnects (opt in via ReconnectPolicy) rebuild the whole conversation:
hello, device registrations, subscriptions. Frames the hub routed while the
session was down are gone; there is no replay.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass, field

from .wire import (
    MISSING,
    Ack,
    Catalog,
    ErrorFrame,
    Sample,
    SignalDescriptor,
    Unknown,
    WireError,
    decode_line,
    encode_data,
    encode_hello_client,
    encode_hello_device,
    encode_subscribe,
)

__all__ = [
    "ClientSession",
    "ConnectError",
    "NotConnected",
    "ProtocolError",
    "PublishRejected",
    "ReconnectPolicy",
    "SessionError",
    "SubscribeRejected",
    "connect",
]

logger = logging.getLogger("thalamus_client")

MAX_LINE_BYTES = 1 << 20  # mirror of the hub's frame cap
REQUEST_TIMEOUT = 10.0


class SessionError(Exception):
    pass


class ConnectError(SessionError):
    """Endpoint unreachable, handshake timed out, or connection lost."""


class ProtocolError(SessionError):
    """The hub answered with an error frame; .code carries its code."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class SubscribeRejected(SessionError):
    """Subscribe nacked; .detail starts with the hub's reason code."""

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class PublishRejected(SessionError):
    pass


class NotConnected(SessionError):
    pass


@dataclass(frozen=True)
class ReconnectPolicy:
    """How hard to try after the hub side of the socket goes away.

    max_retries consecutive failed attempts give up for good; backoff_ms is
    the wait before the first attempt and doubles per failure.
    """

    max_retries: int = 0
    backoff_ms: int = 250


@dataclass
class _Subscription:
    keys: tuple[tuple[str, str], ...]
    pipeline: tuple
    on_sample: object  # callable(Sample)
    key_set: frozenset = field(init=False)

    def __post_init__(self):
        self.key_set = frozenset(self.keys)


class _Pending:
    __slots__ = ("of", "event", "reply")

    def __init__(self, of: str):
        self.of = of
        self.event = threading.Event()
        self.reply: Ack | ErrorFrame | ConnectError | None = None

    def resolve(self, reply) -> None:
        self.reply = reply
        self.event.set()


class _LineReader:
    """Splits a socket's byte stream into frames on newline boundaries."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._buf = bytearray()

    def __iter__(self):
        return self

    def __next__(self) -> bytes:
        while True:
            nl = self._buf.find(b"\n")
            if nl >= 0:
                line = bytes(self._buf[:nl])
                del self._buf[: nl + 1]
                if line.strip():
                    return line
                continue
            if len(self._buf) > MAX_LINE_BYTES:
                raise WireError("line exceeds the frame cap; stream desynced")
            chunk = self.sock.recv(65536)
            if not chunk:
                raise StopIteration
            self._buf.extend(chunk)


def _parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host:
        raise ConnectError(f"endpoint {endpoint!r} is not host:port")
    try:
        return host, int(port)
    except ValueError:
        raise ConnectError(f"endpoint {endpoint!r} has a non-numeric port") from None


class ClientSession:
    """One connection to a hub; create via :func:`connect`.

    Thread-safety: subscribe/register/publish may be called from any thread.
    Requests are serialized (one outstanding at a time); publishes only take
    the send lock. Callbacks always run on the session's reader thread.
    """

    def __init__(
        self,
        endpoint: str,
        identity: str,
        *,
        timeout: float = 5.0,
        reconnect: ReconnectPolicy | None = None,
        on_catalog=None,
    ):
        self.endpoint = endpoint
        self.identity = identity
        self.timeout = timeout
        self.reconnect = reconnect or ReconnectPolicy()
        self.on_catalog = on_catalog
        self.last_error: ErrorFrame | None = None

        self._host, self._port = _parse_endpoint(endpoint)
        self._lock = threading.Lock()
        self._send_lock = threading.Lock()
        self._request_lock = threading.Lock()
        self._sock: socket.socket | None = None
        self._reader: _LineReader | None = None
        self._thread: threading.Thread | None = None
        self._connected = False
        self._closed = False
        self._catalog: tuple[SignalDescriptor, ...] = ()
        self._subs: list[_Subscription] = []
        self._grants: dict[tuple[str, str], SignalDescriptor] = {}
        self._pending: _Pending | None = None

    # ── public surface ───────────────────────────────────────────

    @property
    def state(self) -> str:
        with self._lock:
            if not self._connected:
                return "disconnected"
            return "subscribed" if self._subs else "connected"

    @property
    def catalog(self) -> tuple[SignalDescriptor, ...]:
        with self._lock:
            return self._catalog

    def subscribe(self, selection, on_sample, pipeline=()) -> Ack:
        """Start a stream; ``on_sample(Sample)`` fires once per data frame.

        ``selection`` is an iterable of (device_id, signal) pairs and
        ``pipeline`` an optional list of {"kind", "params"} stage dicts the
        hub applies before delivery. Raises SubscribeRejected with the hub's
        reason (UNKNOWN_SIGNAL ..., INVALID_PIPELINE ...) on a nack.
        """
        keys = tuple((str(dev), str(sig)) for dev, sig in selection)
        sub = _Subscription(keys, tuple(pipeline), on_sample)
        # registered before the request: the ack and the first data frame
        # can arrive back to back, and the reader must already know the sub
        with self._lock:
            self._subs.append(sub)
        try:
            reply = self._request("subscribe", encode_subscribe(keys, sub.pipeline))
        except BaseException:
            self._drop_sub(sub)
            raise
        if isinstance(reply, ErrorFrame):
            self._drop_sub(sub)
            raise ProtocolError(reply.code, reply.message)
        if not reply.ok:
            self._drop_sub(sub)
            raise SubscribeRejected(reply.detail)
        return reply

    def register(self, *descriptors: SignalDescriptor) -> Ack:
        """Device-style hello: acquire the publish grant for descriptors.

        Call again only with new streams; re-registering a stream this
        session already owns raises ProtocolError (DUP_SIGNAL) from the
        hub. All grants are re-announced automatically on reconnect.
        """
        if not descriptors:
            raise ValueError("register needs at least one descriptor")
        reply = self._request(
            "hello", encode_hello_device(self.identity, descriptors)
        )
        if isinstance(reply, ErrorFrame):
            raise ProtocolError(reply.code, reply.message)
        if not reply.ok:  # hubs use error frames here, but stay defensive
            raise ProtocolError("HELLO_REJECTED", reply.detail)
        with self._lock:
            for d in descriptors:
                self._grants[d.key] = d
        return reply

    def publish(self, descriptor: SignalDescriptor, sample: Sample) -> None:
        """Send one sample under a grant held via :meth:`register`.

        Fire and forget: serialized onto the socket from the caller's
        thread, no waiting for the hub. Raises PublishRejected without a
        grant (mirroring the hub's NO_GRANT) and NotConnected when down.
        """
        if sample.key != descriptor.key:
            raise ValueError(
                f"sample {sample.key} does not match descriptor {descriptor.key}"
            )
        with self._lock:
            granted = descriptor.key in self._grants
        if not granted:
            raise PublishRejected(
                f"no_grant: {descriptor.device_id}/{descriptor.signal} "
                "is not registered on this session"
            )
        self._send(encode_data(sample))

    def close(self) -> None:
        """Tear the session down; idempotent, callable from callbacks."""
        with self._lock:
            self._closed = True
            self._connected = False
            sock = self._sock
        if sock is not None:
            _quiet_close(sock)
        thread = self._thread
        if thread and thread.is_alive() and thread is not threading.current_thread():
            thread.join(timeout=2.0)

    def __enter__(self) -> "ClientSession":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # ── connection machinery ─────────────────────────────────────

    def _establish(self) -> None:
        """Dial and replay the whole conversation; caller owns retries."""
        try:
            sock = socket.create_connection(
                (self._host, self._port), timeout=self.timeout
            )
        except OSError as exc:
            raise ConnectError(f"connect_error: {exc}") from exc
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            reader = _LineReader(sock)
            sock.sendall(encode_hello_client(self.identity))
            self._await_catalog(reader)
            with self._lock:
                grants = list(self._grants.values())
                subs = list(self._subs)
            if grants:
                sock.sendall(encode_hello_device(self.identity, grants))
                self._await_ack(reader, "hello")
            for sub in subs:
                sock.sendall(encode_subscribe(sub.keys, sub.pipeline))
                try:
                    self._await_ack(reader, "subscribe")
                except ProtocolError as exc:
                    # the signal is gone from this hub; the sub cannot resume
                    logger.warning("subscription not restored: %s", exc)
                    self._drop_sub(sub)
        except SessionError:
            _quiet_close(sock)
            raise
        except OSError as exc:
            _quiet_close(sock)
            raise ConnectError(f"connect_error: {exc}") from exc
        except StopIteration:
            _quiet_close(sock)
            raise ConnectError("connect_error: hub closed during handshake") from None
        sock.settimeout(None)
        with self._lock:
            self._sock = sock
            self._reader = reader
            self._connected = True

    def _await_catalog(self, reader: _LineReader) -> None:
        deadline = time.monotonic() + self.timeout
        while time.monotonic() < deadline:
            msg = decode_line(next(reader))
            if isinstance(msg, Catalog):
                self._set_catalog(msg)
                return
            if isinstance(msg, ErrorFrame):
                raise ProtocolError(msg.code, msg.message)
        raise ConnectError("connect_error: no catalog within the timeout")

    def _await_ack(self, reader: _LineReader, of: str) -> Ack:
        """Consume frames until the matching ack, dispatching data inline."""
        deadline = time.monotonic() + self.timeout
        while time.monotonic() < deadline:
            msg = decode_line(next(reader))
            if isinstance(msg, Ack) and msg.of == of:
                if not msg.ok:
                    raise ProtocolError("HELLO_REJECTED", msg.detail)
                return msg
            if isinstance(msg, ErrorFrame):
                raise ProtocolError(msg.code, msg.message)
            self._handle(msg)
        raise ConnectError(f"connect_error: no {of} ack within the timeout")

    def _start_reader(self) -> None:
        self._thread = threading.Thread(
            target=self._reader_loop,
            name=f"thalamus-client-{self.identity}",
            daemon=True,
        )
        self._thread.start()

    def _reader_loop(self) -> None:
        while True:
            reader = self._reader
            try:
                for line in reader:
                    try:
                        msg = decode_line(line)
                    except WireError as exc:
                        logger.warning("undecodable frame skipped: %s", exc)
                        continue
                    self._handle(msg)
            except WireError as exc:  # oversized line: boundaries are lost
                logger.error("stream desynced: %s", exc)
            except OSError:
                pass
            self._on_disconnect()
            if self._closed:
                return
            if not self._run_reconnect():
                if self.reconnect.max_retries:
                    logger.error("session %s gave up reconnecting", self.identity)
                else:
                    logger.info("session %s disconnected", self.identity)
                return

    def _handle(self, msg) -> None:
        if isinstance(msg, Sample):
            with self._lock:
                subs = [s for s in self._subs if msg.key in s.key_set]
            for sub in subs:
                try:
                    sub.on_sample(msg)
                except Exception:
                    logger.exception("on_sample callback failed; frame kept moving")
        elif isinstance(msg, Catalog):
            self._set_catalog(msg)
        elif isinstance(msg, Ack):
            pend = self._pending
            if pend is not None and pend.of == msg.of and not pend.event.is_set():
                pend.resolve(msg)
            else:
                logger.debug("unsolicited ack: %s", msg)
        elif isinstance(msg, ErrorFrame):
            pend = self._pending
            if pend is not None and not pend.event.is_set():
                pend.resolve(msg)
            else:
                self.last_error = msg
                logger.warning("hub error: %s %s", msg.code, msg.message)
        elif isinstance(msg, Unknown):
            logger.debug("ignoring %s frame", msg.type)

    def _set_catalog(self, catalog: Catalog) -> None:
        with self._lock:
            self._catalog = catalog.signals
        if self.on_catalog is not None:
            try:
                self.on_catalog(catalog.signals)
            except Exception:
                logger.exception("on_catalog callback failed")

    def _on_disconnect(self) -> None:
        with self._lock:
            self._connected = False
            sock, self._sock = self._sock, None
            pend = self._pending
        if sock is not None:
            _quiet_close(sock)
        if pend is not None and not pend.event.is_set():
            pend.resolve(ConnectError("connect_error: connection lost"))

    def _run_reconnect(self) -> bool:
        delay = self.reconnect.backoff_ms / 1000.0
        for attempt in range(1, self.reconnect.max_retries + 1):
            time.sleep(delay)
            if self._closed:
                return False
            try:
                self._establish()
            except (SessionError, OSError) as exc:
                logger.warning(
                    "reconnect %d/%d failed: %s",
                    attempt,
                    self.reconnect.max_retries,
                    exc,
                )
                delay *= 2.0
                continue
            logger.info("session %s reconnected to %s", self.identity, self.endpoint)
            return True
        return False

    # ── request/response plumbing ────────────────────────────────

    def _request(self, of: str, frame: bytes, timeout: float = REQUEST_TIMEOUT):
        with self._request_lock:
            pend = _Pending(of)
            with self._lock:
                if not self._connected:
                    raise NotConnected("session is disconnected")
                self._pending = pend
            try:
                self._send(frame)
                if not pend.event.wait(timeout):
                    raise ConnectError(f"timed out waiting for the {of} reply")
            finally:
                with self._lock:
                    self._pending = None
        if isinstance(pend.reply, ConnectError):
            raise pend.reply
        return pend.reply

    def _send(self, frame: bytes) -> None:
        with self._send_lock:
            with self._lock:
                sock = self._sock if self._connected else None
            if sock is None:
                raise NotConnected("session is disconnected")
            try:
                sock.sendall(frame)
            except OSError as exc:
                raise ConnectError(f"connect_error: {exc}") from exc

    def _drop_sub(self, sub: _Subscription) -> None:
        with self._lock:
            if sub in self._subs:
                self._subs.remove(sub)


def _quiet_close(sock: socket.socket) -> None:
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    try:
        sock.close()
    except OSError:
        pass


def connect(
    endpoint: str,
    identity: str,
    *,
    timeout: float = 5.0,
    reconnect: ReconnectPolicy | None = None,
    on_catalog=None,
) -> ClientSession:
    """Open a session: dial, hello, return once the catalog has arrived.

    Raises ConnectError when the endpoint is unreachable or silent, and
    ProtocolError if the hub answers the handshake with an error frame.
    """
    session = ClientSession(
        endpoint,
        identity,
        timeout=timeout,
        reconnect=reconnect,
        on_catalog=on_catalog,
    )
    session._establish()
    session._start_reader()
    return session
