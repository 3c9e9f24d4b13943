"""Client/server protocol envelopes and newline-delimited JSON framing.

One UTF-8 JSON object per frame, terminated by '\n'. Every client-initiated
message is answered by exactly one ACK or ERR correlated through msg_id;
EVENT frames carry the subscription id, commit revision, and server time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Optional


class WireError(Exception):
    pass


# Message kinds
AUTH = "AUTH"
PUT = "PUT"
UPDATE = "UPDATE"
GET = "GET"
SUBSCRIBE = "SUBSCRIBE"
UNSUBSCRIBE = "UNSUBSCRIBE"
EVENT = "EVENT"
ACK = "ACK"
ERR = "ERR"
PING = "PING"
PONG = "PONG"

CLIENT_KINDS = {AUTH, PUT, UPDATE, GET, SUBSCRIBE, UNSUBSCRIBE, PING}
SERVER_KINDS = {EVENT, ACK, ERR, PONG}

# ERR codes
E_AUTH_REQUIRED = "AUTH_REQUIRED"
E_DENIED = "DENIED"
E_BAD_PATH = "BAD_PATH"
E_OVERLAPPING_PATHS = "OVERLAPPING_PATHS"
E_UNKNOWN_SUB = "UNKNOWN_SUB"
E_MALFORMED = "MALFORMED"


@dataclass(frozen=True)
class WireMessage:
    kind: str
    msg_id: int = 0
    payload: dict = field(default_factory=dict)

    def encode(self) -> str:
        return json.dumps(
            {"msg_id": self.msg_id, "kind": self.kind, "payload": self.payload},
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def decode(cls, line: str) -> "WireMessage":
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise WireError(f"invalid JSON frame: {exc}") from exc
        if not isinstance(raw, dict):
            raise WireError("frame is not an object")
        kind = raw.get("kind")
        msg_id = raw.get("msg_id", 0)
        payload = raw.get("payload", {})
        if not isinstance(kind, str) or not isinstance(msg_id, int) or not isinstance(payload, dict):
            raise WireError("frame fields have wrong types")
        return cls(kind=kind, msg_id=msg_id, payload=payload)


# -- constructors -----------------------------------------------------------

def auth(msg_id: int, token: str) -> WireMessage:
    return WireMessage(AUTH, msg_id, {"token": token})


def put(msg_id: int, path: str, value: Any, client_time_ms: Optional[int] = None) -> WireMessage:
    payload: dict[str, Any] = {"path": path, "value": value}
    if client_time_ms is not None:
        payload["client_time_ms"] = client_time_ms
    return WireMessage(PUT, msg_id, payload)


def update(msg_id: int, ops: list[dict]) -> WireMessage:
    """ops: [{"path": str, "value": ...}] or [{"path": str, "delete": true}]."""
    return WireMessage(UPDATE, msg_id, {"ops": ops})


def get(msg_id: int, path: str) -> WireMessage:
    return WireMessage(GET, msg_id, {"path": path})


def subscribe(msg_id: int, path: str) -> WireMessage:
    return WireMessage(SUBSCRIBE, msg_id, {"path": path})


def unsubscribe(msg_id: int, sub_id: int) -> WireMessage:
    return WireMessage(UNSUBSCRIBE, msg_id, {"sub_id": sub_id})


def ping(msg_id: int) -> WireMessage:
    return WireMessage(PING, msg_id, {})


def event(
    sub_id: int,
    revision: int,
    path: str,
    value: Any,
    server_time_ms: int,
    absent: bool = False,
) -> WireMessage:
    return WireMessage(
        EVENT,
        0,
        {
            "sub_id": sub_id,
            "revision": revision,
            "path": path,
            "value": None if absent else value,
            "absent": absent,
            "server_time_ms": server_time_ms,
        },
    )


def ack(
    msg_id: int,
    server_time_ms: int,
    revision: Optional[int] = None,
    **extra: Any,
) -> WireMessage:
    payload: dict[str, Any] = {"msg_id": msg_id, "server_time_ms": server_time_ms}
    if revision is not None:
        payload["revision"] = revision
    payload.update(extra)
    return WireMessage(ACK, msg_id, payload)


def err(msg_id: int, code: str, reason: str) -> WireMessage:
    return WireMessage(ERR, msg_id, {"msg_id": msg_id, "code": code, "reason": reason})


def pong(msg_id: int, server_time_ms: int) -> WireMessage:
    return WireMessage(PONG, msg_id, {"server_time_ms": server_time_ms})
