"""Shared fixtures and helpers for the test suite."""

from __future__ import annotations

import pytest

from iotsync import wire
from iotsync.server import SyncServerCore, TokenInfo

DEVICE_TOKEN = "device-token"
USER_TOKEN = "user-token"

REGISTRY = {
    DEVICE_TOKEN: TokenInfo(principal="esp32-1", role="device"),
    USER_TOKEN: TokenInfo(principal="alice", role="user"),
}


def make_core(**kwargs) -> SyncServerCore:
    kwargs.setdefault("registry", dict(REGISTRY))
    return SyncServerCore(**kwargs)


def open_auth(core: SyncServerCore, token: str, now_ms: int = 0) -> str:
    """Open a session and authenticate it; returns the session id."""
    sid = core.open_session(now_ms)
    out = core.handle_message(sid, wire.auth(1, token), now_ms)
    assert out and out[0][1].kind == wire.ACK, f"auth failed: {out}"
    return sid


@pytest.fixture
def core() -> SyncServerCore:
    return make_core()
