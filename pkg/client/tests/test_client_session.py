"""SDK-to-hub integration: every test talks to a real hub subprocess."""

from __future__ import annotations

import logging
import threading

import pytest

import thalamus_client as tc
from thalamus_client.wire import decode_line, encode_data

from _fixture_data import (
    ACCEL,
    N_ACCEL,
    N_ROWS,
    NA_ROWS,
    accel_values,
    free_port,
    pupil_device,
    pupil_value,
    wait_until,
    write_pupil_csv,
)

MOUSE = tc.SignalDescriptor(
    device_id="mouse", signal="x", unit="px", rate_hz=100.0, channels=2
)


class Collector:
    """Thread-safe sample sink; ``done`` fires once ``n`` samples landed."""

    def __init__(self, n: int | None = None):
        self.n = n
        self.samples: list[tc.Sample] = []
        self.done = threading.Event()
        self._lock = threading.Lock()

    def __call__(self, sample: tc.Sample) -> None:
        with self._lock:
            self.samples.append(sample)
            if self.n is not None and len(self.samples) >= self.n:
                self.done.set()

    def __len__(self) -> int:
        with self._lock:
            return len(self.samples)

    def wait(self, timeout: float = 10.0) -> list[tc.Sample]:
        assert self.done.wait(timeout), (
            f"only {len(self)} of {self.n} samples arrived"
        )
        with self._lock:
            return list(self.samples)


# ── connecting and the catalog ───────────────────────────────────────


def test_catalog_tracks_registrations(empty_hub):
    catalogs: list[tuple] = []
    with tc.connect(empty_hub, "viewer", on_catalog=catalogs.append) as sess:
        assert sess.state == "connected"
        assert sess.catalog == ()
        with tc.connect(empty_hub, "rig") as rig:
            rig.register(MOUSE)
            wait_until(lambda: sess.catalog == (MOUSE,), message="catalog gain")
        # the rig hung up, so its signal leaves the live catalog
        wait_until(lambda: sess.catalog == (), message="catalog prune")
    assert len(catalogs) >= 3  # handshake snapshot, gain, prune


def test_connect_refused_becomes_connect_error():
    port = free_port()
    with pytest.raises(tc.ConnectError):
        tc.connect(f"127.0.0.1:{port}", "nobody", timeout=2.0)


def test_connect_rejects_bad_endpoint():
    with pytest.raises(tc.ConnectError):
        tc.connect("no-port-here", "nobody")


# ── subscribing ──────────────────────────────────────────────────────


def test_replay_stream_arrives_exactly(replay_hub):
    col = Collector(N_ROWS)
    with tc.connect(replay_hub, "viewer") as sess:
        assert [d.key for d in sess.catalog] == [("eye1", "pupil")]
        ack = sess.subscribe([("eye1", "pupil")], col)
        assert ack.ok
        assert sess.state == "subscribed"
        got = col.wait()
    assert len(got) == N_ROWS
    for i, s in enumerate(got):
        assert s.key == ("eye1", "pupil")
        assert len(s.values) == 1
        if i in NA_ROWS:
            assert tc.is_missing(s.values[0])
        else:
            assert s.values[0] == pupil_value(i)
    ts = [s.t for s in got]
    assert ts == sorted(ts)
    assert len(set(ts)) == N_ROWS


def test_subscribe_unknown_signal_is_rejected(empty_hub):
    with tc.connect(empty_hub, "viewer") as sess:
        with pytest.raises(tc.SubscribeRejected) as excinfo:
            sess.subscribe([("ghost", "signal")], lambda s: None)
        assert "UNKNOWN_SIGNAL" in excinfo.value.detail
        # the optimistic registration was rolled back
        assert sess.state == "connected"


def test_one_selection_spanning_two_signals(dual_hub):
    col = Collector(N_ROWS + N_ACCEL)
    with tc.connect(dual_hub, "viewer") as sess:
        sess.subscribe([("eye1", "pupil"), ("imu1", "accel")], col)
        got = col.wait(15.0)
    pupil = [s for s in got if s.key == ("eye1", "pupil")]
    accel = [s for s in got if s.key == ("imu1", "accel")]
    assert len(pupil) == N_ROWS and len(accel) == N_ACCEL
    assert [s.t for s in pupil] == sorted(s.t for s in pupil)
    assert [s.t for s in accel] == sorted(s.t for s in accel)
    for i, s in enumerate(accel):
        assert s.values == accel_values(i)


def test_concurrent_subscribes_from_two_threads(dual_hub):
    pupil, accel = Collector(N_ROWS), Collector(N_ACCEL)
    with tc.connect(dual_hub, "viewer") as sess:
        failures: list[BaseException] = []

        def sub(key, col):
            try:
                sess.subscribe([key], col)
            except BaseException as exc:  # surfaced after join
                failures.append(exc)

        threads = [
            threading.Thread(target=sub, args=(("eye1", "pupil"), pupil)),
            threading.Thread(target=sub, args=(("imu1", "accel"), accel)),
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join(5.0)
        assert not failures
        pupil.wait(15.0)
        accel.wait(15.0)
    assert all(s.key == ("eye1", "pupil") for s in pupil.samples)
    assert all(s.key == ("imu1", "accel") for s in accel.samples)


# ── publishing ───────────────────────────────────────────────────────


def test_publish_roundtrip_in_order(empty_hub):
    with tc.connect(empty_hub, "rig") as rig, tc.connect(empty_hub, "viewer") as viewer:
        rig.register(MOUSE)
        wait_until(lambda: MOUSE in viewer.catalog, message="grant in catalog")
        col = Collector(100)
        viewer.subscribe([("mouse", "x")], col)
        for i in range(100):
            values = (tc.MISSING, float(-i)) if i % 10 == 9 else (float(i), float(-i))
            rig.publish(MOUSE, tc.Sample("mouse", "x", i * 10, values))
        got = col.wait()
    assert [s.t for s in got] == [i * 10 for i in range(100)]
    for i, s in enumerate(got):
        if i % 10 == 9:
            assert tc.is_missing(s.values[0])
        else:
            assert s.values[0] == float(i)
        assert s.values[1] == float(-i)


def test_publish_needs_a_grant(empty_hub):
    with tc.connect(empty_hub, "viewer") as sess:
        with pytest.raises(tc.PublishRejected, match="no_grant"):
            sess.publish(MOUSE, tc.Sample("mouse", "x", 0, (1.0, 2.0)))
        sess.register(MOUSE)
        with pytest.raises(ValueError):
            sess.publish(MOUSE, tc.Sample("mouse", "y", 0, (1.0, 2.0)))
        sess.publish(MOUSE, tc.Sample("mouse", "x", 0, (1.0, 2.0)))


# ── callback discipline ──────────────────────────────────────────────


def test_callback_exception_does_not_stop_the_stream(empty_hub, caplog):
    col = Collector(20)

    def flaky(sample: tc.Sample) -> None:
        col(sample)
        if len(col) % 2 == 1:
            raise RuntimeError("user bug")

    with caplog.at_level(logging.ERROR, logger="thalamus_client"):
        with tc.connect(empty_hub, "rig") as rig:
            rig.register(MOUSE)
            with tc.connect(empty_hub, "viewer") as viewer:
                wait_until(lambda: MOUSE in viewer.catalog, message="catalog")
                viewer.subscribe([("mouse", "x")], flaky)
                for i in range(20):
                    rig.publish(MOUSE, tc.Sample("mouse", "x", i, (float(i), 0.0)))
                got = col.wait()
                assert viewer.state == "subscribed"
    assert [s.t for s in got] == list(range(20))
    assert any("on_sample callback failed" in r.message for r in caplog.records)


def test_ndjson_recorder_writes_canonical_lines(replay_hub, tmp_path):
    rec_path = tmp_path / "capture.ndjson"
    col = Collector(N_ROWS)
    with tc.connect(replay_hub, "recorder") as sess:
        with tc.NdjsonRecorder(rec_path) as rec:
            def tee(sample: tc.Sample) -> None:
                rec(sample)
                col(sample)

            sess.subscribe([("eye1", "pupil")], tee)
            col.wait()
    lines = rec_path.read_bytes().splitlines()
    assert len(lines) == N_ROWS
    for line in lines:
        sample = decode_line(line)
        assert encode_data(sample) == line + b"\n"
    assert b'"NA"' in lines[NA_ROWS[0]]


# ── lifecycle ────────────────────────────────────────────────────────


def test_close_is_final_and_idempotent(empty_hub):
    sess = tc.connect(empty_hub, "brief")
    sess.close()
    assert sess.state == "disconnected"
    with pytest.raises(tc.NotConnected):
        sess.subscribe([("a", "b")], lambda s: None)
    with pytest.raises(tc.NotConnected):
        sess.register(MOUSE)
    sess.close()


def test_reconnect_restores_subscriptions(hub_factory, tmp_path):
    device = pupil_device()
    device["replay"] = {"speed": 2.0, "rebase": True, "loop": True}
    write_pupil_csv(tmp_path / "pupil.csv")
    port = free_port()
    first = hub_factory([device], port=port, replay_settle_ms=100)

    col = Collector()
    policy = tc.ReconnectPolicy(max_retries=25, backoff_ms=100)
    with tc.connect(first.endpoint, "sticky", reconnect=policy) as sess:
        sess.subscribe([("eye1", "pupil")], col)
        wait_until(lambda: len(col) >= 10, message="first stream")
        first.stop()
        wait_until(lambda: sess.state == "disconnected", message="drop detected")
        seen_before = len(col)
        hub_factory([device], port=port, replay_settle_ms=100)
        wait_until(
            lambda: sess.state == "subscribed", timeout=15.0, message="resubscribe"
        )
        # frames routed during the outage are gone for good; the stream
        # simply resumes from wherever the new hub is
        wait_until(
            lambda: len(col) >= seen_before + 10, timeout=15.0, message="resume"
        )
    assert all(s.key == ("eye1", "pupil") for s in col.samples)


def test_reconnect_restores_grants(hub_factory):
    port = free_port()
    first = hub_factory([], port=port)
    policy = tc.ReconnectPolicy(max_retries=25, backoff_ms=100)
    with tc.connect(first.endpoint, "rig", reconnect=policy) as rig:
        rig.register(MOUSE)
        first.stop()
        wait_until(lambda: rig.state == "disconnected", message="drop detected")
        second = hub_factory([], port=port)
        wait_until(lambda: rig.state == "connected", timeout=15.0, message="rejoin")
        with tc.connect(second.endpoint, "viewer") as viewer:
            wait_until(lambda: MOUSE in viewer.catalog, message="grant restored")
            col = Collector(5)
            viewer.subscribe([("mouse", "x")], col)
            for i in range(5):
                rig.publish(MOUSE, tc.Sample("mouse", "x", i, (float(i), 0.0)))
            got = col.wait()
    assert [s.t for s in got] == [0, 1, 2, 3, 4]
