"""Transport-agnostic realtime sync service core.

Sessions feed wire messages in; the core answers with a routed list of
outbound messages (ACK/ERR to the sender, EVENT fan-out to subscribers).
Keeping the core synchronous and clock-injected lets the simulator drive it
deterministically while the asyncio network layer wraps the same object.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Any, Optional

from . import wire
from .datatree import (
    ABSENT,
    DataTree,
    EmptySegmentError,
    ForbiddenCharacterError,
    NonFiniteNumberError,
    OverlappingPathsError,
    Path,
    TreeError,
    WriteOp,
)
from .persistence import CommitRecord, MemoryCommitLog
from .rules import ANONYMOUS, AuthContext, RuleSet, default_ruleset

Outbound = tuple[str, wire.WireMessage]  # (session_id, message)

DEFAULT_HEARTBEAT_TIMEOUT_MS = 15_000
DEFAULT_CHECKPOINT_EVERY = 100


@dataclass(frozen=True)
class TokenInfo:
    principal: str
    role: str  # "device" | "user"


def load_token_registry(path: str | FsPath) -> dict[str, TokenInfo]:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    return {
        token: TokenInfo(principal=info["principal"], role=info["role"])
        for token, info in raw.items()
    }


@dataclass
class Subscription:
    sub_id: int
    path: Path


@dataclass
class SessionState:
    session_id: str
    auth: AuthContext = ANONYMOUS
    subscriptions: dict[int, Subscription] = field(default_factory=dict)
    last_seen_ms: int = 0
    closed: bool = False


class SyncServerCore:
    def __init__(
        self,
        rules: Optional[RuleSet] = None,
        registry: Optional[dict[str, TokenInfo]] = None,
        tree: Optional[DataTree] = None,
        commit_log=None,
        heartbeat_timeout_ms: int = DEFAULT_HEARTBEAT_TIMEOUT_MS,
        checkpoint_every: int = DEFAULT_CHECKPOINT_EVERY,
    ):
        self.tree = tree if tree is not None else DataTree()
        self.rules = rules if rules is not None else default_ruleset()
        self.registry = registry if registry is not None else {}
        self.commit_log = commit_log if commit_log is not None else MemoryCommitLog()
        self.heartbeat_timeout_ms = heartbeat_timeout_ms
        self.checkpoint_every = checkpoint_every
        self.sessions: dict[str, SessionState] = {}
        self._next_session = 1
        self._next_sub = 1
        self._last_server_time = 0
        self._commits_since_checkpoint = 0

    # -- clock -------------------------------------------------------------

    def assign_server_time(self, now_ms: int) -> int:
        """Authoritative, non-decreasing server timestamp."""
        self._last_server_time = max(self._last_server_time, int(now_ms))
        return self._last_server_time

    # -- session lifecycle -------------------------------------------------

    def open_session(self, now_ms: int, session_id: Optional[str] = None) -> str:
        if session_id is None:
            session_id = f"s{self._next_session}"
            self._next_session += 1
        self.sessions[session_id] = SessionState(session_id=session_id, last_seen_ms=now_ms)
        return session_id

    def close_session(self, session_id: str) -> None:
        session = self.sessions.pop(session_id, None)
        if session:
            session.closed = True
            session.subscriptions.clear()

    def expire_sessions(self, now_ms: int) -> list[str]:
        expired = [
            sid
            for sid, s in self.sessions.items()
            if now_ms - s.last_seen_ms > self.heartbeat_timeout_ms
        ]
        for sid in expired:
            self.close_session(sid)
        return expired

    # -- message handling --------------------------------------------------

    def handle_message(
        self, session_id: str, msg: wire.WireMessage, now_ms: int
    ) -> list[Outbound]:
        session = self.sessions.get(session_id)
        if session is None or session.closed:
            return []
        session.last_seen_ms = now_ms
        server_time = self.assign_server_time(now_ms)

        handler = {
            wire.AUTH: self._handle_auth,
            wire.PING: self._handle_ping,
            wire.PUT: self._handle_put,
            wire.UPDATE: self._handle_update,
            wire.GET: self._handle_get,
            wire.SUBSCRIBE: self._handle_subscribe,
            wire.UNSUBSCRIBE: self._handle_unsubscribe,
        }.get(msg.kind)
        if handler is None:
            return [(session_id, wire.err(msg.msg_id, wire.E_MALFORMED, f"unknown kind {msg.kind!r}"))]
        if not session.auth.authenticated and msg.kind not in (wire.AUTH, wire.PING):
            return [(session_id, wire.err(msg.msg_id, wire.E_AUTH_REQUIRED, "authenticate first"))]
        try:
            return handler(session, msg, server_time)
        except _Reject as rej:
            return [(session.session_id, wire.err(msg.msg_id, rej.code, rej.reason))]

    def _handle_auth(self, session, msg, server_time) -> list[Outbound]:
        token = msg.payload.get("token")
        info = self.registry.get(token) if isinstance(token, str) else None
        if info is None:
            return [(session.session_id, wire.err(msg.msg_id, wire.E_DENIED, "BadToken"))]
        session.auth = AuthContext(authenticated=True, principal=info.principal, role=info.role)
        return [(session.session_id, wire.ack(msg.msg_id, server_time))]

    def _handle_ping(self, session, msg, server_time) -> list[Outbound]:
        return [(session.session_id, wire.pong(msg.msg_id, server_time))]

    def _handle_get(self, session, msg, server_time) -> list[Outbound]:
        path = self._parse_path(msg)
        decision = self.rules.evaluate_read(session.auth, path)
        if not decision:
            raise _Reject(wire.E_DENIED, decision.reason)
        value = self.tree.get(path)
        return [
            (
                session.session_id,
                wire.ack(
                    msg.msg_id,
                    server_time,
                    revision=self.tree.revision,
                    value=None if value is ABSENT else value,
                    absent=value is ABSENT,
                ),
            )
        ]

    def _handle_put(self, session, msg, server_time) -> list[Outbound]:
        path = self._parse_path(msg)
        if "value" not in msg.payload:
            raise _Reject(wire.E_MALFORMED, "PUT requires a value")
        ops = [self._make_set(path, msg.payload["value"])]
        return self._commit(session, msg, ops, server_time)

    def _handle_update(self, session, msg, server_time) -> list[Outbound]:
        raw_ops = msg.payload.get("ops")
        if not isinstance(raw_ops, list) or not raw_ops:
            raise _Reject(wire.E_MALFORMED, "UPDATE requires a non-empty ops list")
        ops: list[WriteOp] = []
        for o in raw_ops:
            if not isinstance(o, dict) or "path" not in o:
                raise _Reject(wire.E_MALFORMED, "each op needs a path")
            path = self._parse_path_text(o["path"])
            if o.get("delete"):
                ops.append(WriteOp.del_(path))
            elif "value" in o:
                ops.append(self._make_set(path, o["value"]))
            else:
                raise _Reject(wire.E_MALFORMED, "each op needs a value or delete flag")
        return self._commit(session, msg, ops, server_time)

    def _make_set(self, path: Path, value: Any) -> WriteOp:
        try:
            return WriteOp.set(path, value)
        except NonFiniteNumberError as exc:
            raise _Reject(wire.E_MALFORMED, str(exc))
        except TreeError as exc:
            raise _Reject(wire.E_BAD_PATH, str(exc))

    def _commit(self, session, msg, ops: list[WriteOp], server_time) -> list[Outbound]:
        # Rules first: one denied op rejects the whole batch before commit.
        for op in ops:
            candidate = ABSENT if op.delete else op.value
            decision = self.rules.evaluate_write(
                session.auth, op.path, candidate, self.tree.get(op.path), server_time
            )
            if not decision:
                raise _Reject(wire.E_DENIED, f"{decision.reason} at {op.path}")
        try:
            revision, events = self.tree.commit(ops, server_time)
        except OverlappingPathsError as exc:
            raise _Reject(wire.E_OVERLAPPING_PATHS, str(exc))
        self.commit_log.append(
            CommitRecord(revision=revision, server_time_ms=server_time, ops=tuple(ops))
        )
        self._commits_since_checkpoint += 1
        if self._commits_since_checkpoint >= self.checkpoint_every:
            self.commit_log.checkpoint(self.tree)
            self._commits_since_checkpoint = 0

        out: list[Outbound] = [
            (session.session_id, wire.ack(msg.msg_id, server_time, revision=revision))
        ]
        for sid in sorted(self.sessions):
            subs = self.sessions[sid].subscriptions
            for sub_id in sorted(subs):
                sub = subs[sub_id]
                for ev in events:
                    if sub.path.is_ancestor_or_equal(ev.path):
                        path, value = ev.path, ev.new_value
                    elif ev.path.is_ancestor_or_equal(sub.path):
                        # Changed root sits above the subscription (e.g. a
                        # branch was just created); narrow to the sub path.
                        path, value = sub.path, self.tree.get(sub.path)
                    else:
                        continue
                    out.append(
                        (
                            sid,
                            wire.event(
                                sub_id,
                                ev.revision,
                                path.render(),
                                None if value is ABSENT else value,
                                server_time,
                                absent=value is ABSENT,
                            ),
                        )
                    )
        return out

    def _handle_subscribe(self, session, msg, server_time) -> list[Outbound]:
        path = self._parse_path(msg)
        decision = self.rules.evaluate_read(session.auth, path)
        if not decision:
            raise _Reject(wire.E_DENIED, decision.reason)
        sub_id = self._next_sub
        self._next_sub += 1
        session.subscriptions[sub_id] = Subscription(sub_id=sub_id, path=path)
        value = self.tree.get(path)
        # ACK first, then the initial-snapshot event with the current value.
        return [
            (session.session_id, wire.ack(msg.msg_id, server_time, revision=self.tree.revision, sub_id=sub_id)),
            (
                session.session_id,
                wire.event(
                    sub_id,
                    self.tree.revision,
                    path.render(),
                    None if value is ABSENT else value,
                    server_time,
                    absent=value is ABSENT,
                ),
            ),
        ]

    def _handle_unsubscribe(self, session, msg, server_time) -> list[Outbound]:
        sub_id = msg.payload.get("sub_id")
        if sub_id not in session.subscriptions:
            raise _Reject(wire.E_UNKNOWN_SUB, f"no subscription {sub_id!r}")
        del session.subscriptions[sub_id]
        return [(session.session_id, wire.ack(msg.msg_id, server_time))]

    def _parse_path(self, msg: wire.WireMessage) -> Path:
        return self._parse_path_text(msg.payload.get("path"))

    def _parse_path_text(self, text) -> Path:
        if not isinstance(text, str):
            raise _Reject(wire.E_MALFORMED, "missing path")
        try:
            return Path.parse(text)
        except (EmptySegmentError, ForbiddenCharacterError) as exc:
            raise _Reject(wire.E_BAD_PATH, str(exc))


class _Reject(Exception):
    def __init__(self, code: str, reason: str):
        super().__init__(reason)
        self.code = code
        self.reason = reason
