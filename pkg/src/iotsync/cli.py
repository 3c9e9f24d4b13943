"""Command-line entry points: server, device agent, simulator, and ad-hoc
client operations (get/put/toggle/watch) against a running server.

Exit codes: 0 success, 2 denied by rules/auth, 3 transport failure,
4 malformed input.
"""

from __future__ import annotations

import argparse
import json
import logging
import queue
import random
import socket
import sys
import threading
import time
from typing import Any, Iterator, Optional

from . import wire
from .agent import AgentConfig, DeviceAgent, FileActionLog
from .net import ServerConfig, run_server, wall_ms
from .persistence import read_log
from .simnet import ExperimentConfig, SensorConfig, SensorModel, run_experiment

EXIT_OK = 0
EXIT_DENIED = 2
EXIT_TRANSPORT = 3
EXIT_MALFORMED = 4

log = logging.getLogger(__name__)


class ClientError(Exception):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


def _err_exit_code(code: str) -> int:
    if code in (wire.E_DENIED, wire.E_AUTH_REQUIRED):
        return EXIT_DENIED
    return EXIT_MALFORMED


class SyncClient:
    """Blocking newline-delimited JSON client over TCP."""

    def __init__(self, server: str, token: Optional[str] = None, timeout: float = 10.0):
        host, _, port = server.rpartition(":")
        try:
            self._sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout=timeout)
        except OSError as exc:
            raise ClientError(f"cannot connect to {server}: {exc}", EXIT_TRANSPORT) from exc
        self._reader = self._sock.makefile("r", encoding="utf-8")
        self._next_id = 1
        self.events: list[wire.WireMessage] = []
        if token:
            self.request(wire.auth(0, token))

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _send(self, msg: wire.WireMessage) -> None:
        try:
            self._sock.sendall(msg.encode().encode("utf-8") + b"\n")
        except OSError as exc:
            raise ClientError(f"send failed: {exc}", EXIT_TRANSPORT) from exc

    def _recv(self) -> wire.WireMessage:
        try:
            line = self._reader.readline()
        except OSError as exc:
            raise ClientError(f"receive failed: {exc}", EXIT_TRANSPORT) from exc
        if not line:
            raise ClientError("server closed the connection", EXIT_TRANSPORT)
        return wire.WireMessage.decode(line)

    def request(self, msg: wire.WireMessage) -> wire.WireMessage:
        """Send one message and block for its ACK; raise on ERR.

        EVENT frames arriving in between are queued on self.events.
        """
        msg = wire.WireMessage(msg.kind, self._next_id, msg.payload)
        self._next_id += 1
        self._send(msg)
        while True:
            reply = self._recv()
            if reply.kind == wire.EVENT:
                self.events.append(reply)
                continue
            if reply.payload.get("msg_id") == msg.msg_id or reply.msg_id == msg.msg_id:
                if reply.kind == wire.ERR:
                    code = reply.payload.get("code", wire.E_MALFORMED)
                    reason = reply.payload.get("reason", "")
                    raise ClientError(f"{code}: {reason}", _err_exit_code(code))
                return reply

    def stream(self) -> Iterator[wire.WireMessage]:
        while True:
            yield self._recv()


# -- subcommands -------------------------------------------------------------


def cmd_serve(args) -> int:
    config = ServerConfig.from_file(args.config) if args.config else ServerConfig()
    if args.host:
        config.host = args.host
    if args.port:
        config.port = args.port
    run_server(config)
    return EXIT_OK


def cmd_agent(args) -> int:
    """Run the device state machine against a live server in real time."""
    config = AgentConfig()
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = AgentConfig.from_json(json.load(fh))
    if args.server:
        config.server = args.server
    if args.token:
        config.token = args.token

    inbound: "queue.Queue[wire.WireMessage]" = queue.Queue()
    lock = threading.Lock()
    state: dict[str, Any] = {"sock": None}

    def ensure_socket():
        with lock:
            if state["sock"] is None:
                host, _, port = config.server.rpartition(":")
                state["sock"] = socket.create_connection((host or "127.0.0.1", int(port)), timeout=5)
                threading.Thread(target=reader, args=(state["sock"],), daemon=True).start()
            return state["sock"]

    def drop_socket(sock):
        with lock:
            if state["sock"] is sock:
                state["sock"] = None
        try:
            sock.close()
        except OSError:
            pass

    def reader(sock):
        fh = sock.makefile("r", encoding="utf-8")
        try:
            for line in fh:
                try:
                    inbound.put(wire.WireMessage.decode(line))
                except wire.WireError:
                    log.warning("dropping malformed frame: %r", line.strip())
        except OSError:
            pass
        drop_socket(sock)

    class RealtimeTransport:
        def send(self, msg: wire.WireMessage) -> bool:
            try:
                sock = ensure_socket()
                sock.sendall(msg.encode().encode("utf-8") + b"\n")
                return True
            except OSError:
                with lock:
                    sock = state["sock"]
                if sock is not None:
                    drop_socket(sock)
                return False

    sensor = SensorModel(SensorConfig(), random.Random(args.seed))
    action_log = FileActionLog(args.log) if args.log else None
    agent = DeviceAgent(
        config,
        transport=RealtimeTransport(),
        sensor=sensor.sample,
        start_ms=wall_ms(),
        action_log=action_log,
    )

    log.info("device agent %s online against %s", config.device_id, config.server)
    while True:
        due = agent.next_due_ms()
        now = wall_ms()
        wait_s = 1.0 if due is None else max(0.0, (due - now) / 1000)
        try:
            msg = inbound.get(timeout=wait_s) if wait_s > 0 else inbound.get_nowait()
            agent.on_message(msg, wall_ms())
        except queue.Empty:
            pass
        agent.step(wall_ms())


def cmd_sim(args) -> int:
    config = ExperimentConfig()
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = ExperimentConfig.from_json(json.load(fh))
    if args.seed is not None:
        config.seed = args.seed
    if args.duration is not None:
        config.duration_ms = args.duration
    result = run_experiment(config)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            fh.write(result.trace_jsonl() + "\n")
    if args.json:
        print(result.report.to_json())
    else:
        print(result.report.format_table())
    return EXIT_OK


def cmd_get(args) -> int:
    with SyncClient(args.server, token=args.token) as client:
        reply = client.request(wire.get(0, args.path))
    if reply.payload.get("absent"):
        print("(absent)")
    else:
        print(json.dumps(reply.payload.get("value"), sort_keys=True))
    return EXIT_OK


def cmd_put(args) -> int:
    try:
        value = json.loads(args.value)
    except json.JSONDecodeError:
        value = args.value  # bare text
    with SyncClient(args.server, token=args.token) as client:
        reply = client.request(wire.put(0, args.path, value))
    print(f"revision {reply.payload.get('revision')}")
    return EXIT_OK


def cmd_toggle(args) -> int:
    path = f"/leds/{args.target}"
    with SyncClient(args.server, token=args.token) as client:
        current = client.request(wire.get(0, path)).payload
        new_value = not bool(current.get("value")) if not current.get("absent") else True
        reply = client.request(wire.put(0, path, new_value))
    print(f"{path} -> {str(new_value).lower()} (revision {reply.payload.get('revision')})")
    return EXIT_OK


def cmd_watch(args) -> int:
    with SyncClient(args.server, token=args.token) as client:
        client.request(wire.subscribe(0, args.path))
        for ev in client.events:
            _print_event(ev)
        client.events.clear()
        for msg in client.stream():
            if msg.kind == wire.EVENT:
                _print_event(msg)
    return EXIT_OK


def _print_event(msg: wire.WireMessage) -> None:
    p = msg.payload
    value = "(absent)" if p.get("absent") else json.dumps(p.get("value"), sort_keys=True)
    print(f"rev {p.get('revision')} {p.get('path')} = {value}", flush=True)


def cmd_dumplog(args) -> int:
    from pathlib import Path as FsPath

    for record in read_log(FsPath(args.data_dir) / "log.jsonl"):
        print(json.dumps(record.to_json(), sort_keys=True, separators=(",", ":")))
    return EXIT_OK


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iotsync", description="Realtime IoT sync platform")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the sync server")
    p.add_argument("--config", help="server config JSON file")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("agent", help="run the device agent against a live server")
    p.add_argument("--config", help="agent config JSON file")
    p.add_argument("--server", help="host:port")
    p.add_argument("--token")
    p.add_argument("--seed", type=int, default=0, help="synthetic sensor seed")
    p.add_argument("--log", help="append device actions to this JSONL file")
    p.set_defaults(fn=cmd_agent)

    p = sub.add_parser("sim", help="run a deterministic simulation experiment")
    p.add_argument("--config", help="experiment config JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--duration", type=int, help="duration in ms")
    p.add_argument("--trace", help="write the message trace to this JSONL file")
    p.add_argument("--json", action="store_true", help="machine-readable report")
    p.set_defaults(fn=cmd_sim)

    for name, fn, extra in (
        ("get", cmd_get, ["path"]),
        ("put", cmd_put, ["path", "value"]),
        ("toggle", cmd_toggle, ["target"]),
        ("watch", cmd_watch, ["path"]),
    ):
        p = sub.add_parser(name, help=f"{name} against a running server")
        p.add_argument("--server", default="127.0.0.1:8787")
        p.add_argument("--token", required=True)
        for pos in extra:
            p.add_argument(pos)
        p.set_defaults(fn=fn)

    p = sub.add_parser("dumplog", help="print the commit log of a data directory")
    p.add_argument("data_dir")
    p.set_defaults(fn=cmd_dumplog)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    try:
        return args.fn(args)
    except ClientError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
