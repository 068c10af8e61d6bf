"""Shared fixtures: in-process hubs and raw wire clients.

Importable helpers (WireClient, make_stream, the criterion scorecard) live
in _support.py; this file only wires fixtures and the terminal summary.
"""

from __future__ import annotations

import pytest

from thalamus.hub import Hub, HubConfigView, HubLimits
from thalamus.ingest import ReplayPlan

from _support import CRITERIA, WireClient


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        name, ok = CRITERIA[number]
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {name}: {verdict}")


@pytest.fixture
def make_hub():
    hubs: list[Hub] = []

    def _make(
        replays: tuple[ReplayPlan, ...] = (),
        admin_token: str = "sesame",
        seed: int = 0,
        limits: HubLimits | None = None,
        replay_settle_ms: int = 300,
        clock=None,
    ) -> Hub:
        view = HubConfigView(
            host="127.0.0.1",
            port=0,
            admin_token=admin_token,
            seed=seed,
            replays=replays,
            limits=limits or HubLimits(),
            replay_settle_ms=replay_settle_ms,
        )
        h = Hub(view, clock=clock) if clock else Hub(view)
        h.start()
        hubs.append(h)
        return h

    yield _make
    for h in hubs:
        h.shutdown(flush_deadline=1.0)


@pytest.fixture
def clients():
    opened: list[WireClient] = []

    def _connect(port: int, **kw) -> WireClient:
        c = WireClient(port, **kw)
        opened.append(c)
        return c

    yield _connect
    for c in opened:
        c.close()
