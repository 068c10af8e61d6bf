"""Fixtures that stand up a real hub process for the SDK to talk to.

The SDK's only contract is the wire protocol, so every integration test
here runs against ``thalamus serve`` as a subprocess, configured from
scratch in a temp directory. Nothing imports hub internals.
"""

from __future__ import annotations

import json
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

import pytest

from _fixture_data import (
    accel_device,
    free_port,
    pupil_device,
    write_accel_json,
    write_pupil_csv,
)

SERVE = [sys.executable, "-m", "thalamus.cli", "serve", "--config"]


class HubHandle:
    def __init__(self, endpoint: str, proc: subprocess.Popen, log: Path):
        self.endpoint = endpoint
        self.proc = proc
        self.log = log

    def stop(self, timeout: float = 5.0) -> None:
        if self.proc.poll() is None:
            self.proc.send_signal(signal.SIGINT)
            try:
                self.proc.wait(timeout=timeout)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()


@pytest.fixture
def hub_factory(tmp_path):
    """Returns start(devices, **overrides) -> HubHandle, reaping on teardown.

    Pass ``port=`` to pin the listen port, which lets a test stop one hub
    and raise a successor at the same endpoint.
    """
    handles: list[HubHandle] = []

    def start(
        devices=(),
        *,
        port=None,
        admin_token="sesame",
        seed=7,
        replay_settle_ms=200,
    ) -> HubHandle:
        if port is None:
            port = free_port()
        config = {
            "listen": f"127.0.0.1:{port}",
            "admin_token": admin_token,
            "seed": seed,
            "replay_settle_ms": replay_settle_ms,
            "devices": list(devices),
        }
        cfg = tmp_path / f"hub-{port}.json"
        cfg.write_text(json.dumps(config, indent=2), encoding="utf-8")
        log = tmp_path / f"hub-{port}.log"
        proc = subprocess.Popen(
            SERVE + [str(cfg)],
            stdout=subprocess.DEVNULL,
            stderr=open(log, "w"),
        )
        handle = HubHandle(f"127.0.0.1:{port}", proc, log)
        handles.append(handle)
        deadline = time.monotonic() + 10.0
        while time.monotonic() < deadline:
            if proc.poll() is not None:
                raise RuntimeError(
                    f"hub exited with {proc.returncode}: {log.read_text()}"
                )
            try:
                with socket.create_connection(("127.0.0.1", port), timeout=0.2):
                    return handle
            except OSError:
                time.sleep(0.05)
        raise RuntimeError(f"hub never started listening: {log.read_text()}")

    yield start
    for handle in handles:
        handle.stop()


@pytest.fixture
def empty_hub(hub_factory) -> str:
    """A hub with no replay devices; the catalog starts empty."""
    return hub_factory([]).endpoint


@pytest.fixture
def replay_hub(hub_factory, tmp_path) -> str:
    """A hub replaying the 100-row pupil fixture (NA at rows 10, 37, 64).

    Replay starts once the first subscriber lands, so a test that connects
    and subscribes promptly sees the file from row zero. speed 4 keeps the
    2 s recording down to half a second of wall time.
    """
    write_pupil_csv(tmp_path / "pupil.csv")
    return hub_factory([pupil_device()]).endpoint


@pytest.fixture
def dual_hub(hub_factory, tmp_path) -> str:
    """A hub replaying both fixtures: eye1/pupil (csv) and imu1/accel (json)."""
    write_pupil_csv(tmp_path / "pupil.csv")
    write_accel_json(tmp_path / "accel.json")
    return hub_factory([pupil_device(), accel_device()]).endpoint
