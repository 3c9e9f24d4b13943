"""Network front end for the sync core: TCP and WebSocket endpoints.

Both endpoints speak identical newline-delimited JSON frames (the WebSocket
carries one frame per text message, without the trailing newline). All
sessions funnel into one SyncServerCore on the asyncio event loop, so the
single-writer commit order needs no extra locking.
"""

from __future__ import annotations

import asyncio
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Callable, Optional

import websockets

from . import wire
from .datatree import DataTree, WriteOp
from .persistence import FileCommitLog, recover
from .rules import default_ruleset, load_ruleset
from .server import SyncServerCore, TokenInfo, load_token_registry

log = logging.getLogger(__name__)


def wall_ms() -> int:
    return int(time.time() * 1000)


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 8787
    ws_port: Optional[int] = 8788
    heartbeat_timeout_ms: int = 15_000
    ruleset_file: Optional[str] = None
    tokens_file: Optional[str] = None
    data_dir: Optional[str] = None
    seed_snapshot: Optional[str] = None
    tokens: dict = field(default_factory=dict)  # inline registry alternative

    @classmethod
    def from_file(cls, path: str) -> "ServerConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in raw.items() if k in known})


def build_core(config: ServerConfig) -> SyncServerCore:
    rules = load_ruleset(config.ruleset_file) if config.ruleset_file else default_ruleset()
    registry: dict[str, TokenInfo] = {
        token: TokenInfo(principal=info["principal"], role=info["role"])
        for token, info in config.tokens.items()
    }
    if config.tokens_file:
        registry.update(load_token_registry(config.tokens_file))

    tree = DataTree()
    commit_log = None
    if config.data_dir:
        tree = recover(config.data_dir)
        commit_log = FileCommitLog(config.data_dir)
    core = SyncServerCore(
        rules=rules,
        registry=registry,
        tree=tree,
        commit_log=commit_log,
        heartbeat_timeout_ms=config.heartbeat_timeout_ms,
    )
    if config.seed_snapshot and core.tree.revision == 0:
        doc = FsPath(config.seed_snapshot).read_text(encoding="utf-8")
        seeded = DataTree.restore_snapshot(doc)
        root = seeded.get("/")
        if isinstance(root, dict) and root:
            core.tree.commit([WriteOp.set("/", root)], wall_ms())
    return core


class NetworkServer:
    def __init__(self, core: SyncServerCore, config: ServerConfig):
        self.core = core
        self.config = config
        self._senders: dict[str, Callable[[wire.WireMessage], None]] = {}
        self._closers: dict[str, Callable[[], None]] = {}
        self._tcp_server: Optional[asyncio.AbstractServer] = None
        self._ws_server = None
        self._expiry_task: Optional[asyncio.Task] = None

    # -- shared session plumbing ------------------------------------------

    def _route(self, outbound) -> None:
        for sid, msg in outbound:
            sender = self._senders.get(sid)
            if sender is not None:
                sender(msg)

    def _handle_line(self, sid: str, line: str) -> None:
        try:
            msg = wire.WireMessage.decode(line)
        except wire.WireError as exc:
            self._route([(sid, wire.err(0, wire.E_MALFORMED, str(exc)))])
            return
        self._route(self.core.handle_message(sid, msg, wall_ms()))

    def _open(self, sender, closer) -> str:
        sid = self.core.open_session(wall_ms())
        self._senders[sid] = sender
        self._closers[sid] = closer
        return sid

    def _close(self, sid: str) -> None:
        self.core.close_session(sid)
        self._senders.pop(sid, None)
        self._closers.pop(sid, None)

    async def _expiry_loop(self) -> None:
        while True:
            await asyncio.sleep(1.0)
            for sid in self.core.expire_sessions(wall_ms()):
                closer = self._closers.get(sid)
                self._senders.pop(sid, None)
                self._closers.pop(sid, None)
                if closer is not None:
                    closer()

    # -- TCP ---------------------------------------------------------------

    async def _tcp_session(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        def sender(msg: wire.WireMessage) -> None:
            try:
                writer.write(msg.encode().encode("utf-8") + b"\n")
            except ConnectionError:
                pass

        sid = self._open(sender, lambda: writer.close())
        log.info("tcp session %s from %s", sid, writer.get_extra_info("peername"))
        try:
            while True:
                raw = await reader.readline()
                if not raw:
                    break
                self._handle_line(sid, raw.decode("utf-8"))
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            self._close(sid)
            try:
                writer.close()
            except RuntimeError:
                pass  # event loop already shut down

    # -- WebSocket ---------------------------------------------------------

    async def _ws_session(self, ws) -> None:
        loop = asyncio.get_running_loop()

        def sender(msg: wire.WireMessage) -> None:
            loop.create_task(_ws_send_quiet(ws, msg.encode()))

        sid = self._open(sender, lambda: loop.create_task(_ws_close_quiet(ws)))
        log.info("ws session %s", sid)
        try:
            async for frame in ws:
                if isinstance(frame, bytes):
                    frame = frame.decode("utf-8")
                self._handle_line(sid, frame)
        except websockets.ConnectionClosed:
            pass
        finally:
            self._close(sid)

    # -- lifecycle ---------------------------------------------------------

    async def start(self) -> None:
        self._tcp_server = await asyncio.start_server(
            self._tcp_session, self.config.host, self.config.port
        )
        if self.config.ws_port:
            self._ws_server = await websockets.serve(
                self._ws_session, self.config.host, self.config.ws_port
            )
        self._expiry_task = asyncio.create_task(self._expiry_loop())
        log.info(
            "listening on tcp %s:%s ws %s",
            self.config.host,
            self.config.port,
            self.config.ws_port,
        )

    async def stop(self) -> None:
        if self._expiry_task:
            self._expiry_task.cancel()
        if self._tcp_server:
            self._tcp_server.close()
            await self._tcp_server.wait_closed()
        if self._ws_server:
            self._ws_server.close()
            await self._ws_server.wait_closed()

    async def serve_forever(self) -> None:
        await self.start()
        try:
            await asyncio.Event().wait()
        finally:
            await self.stop()


async def _ws_send_quiet(ws, text: str) -> None:
    try:
        await ws.send(text)
    except websockets.ConnectionClosed:
        pass


async def _ws_close_quiet(ws) -> None:
    try:
        await ws.close()
    except websockets.ConnectionClosed:
        pass


def run_server(config: ServerConfig) -> None:
    core = build_core(config)
    asyncio.run(NetworkServer(core, config).serve_forever())
