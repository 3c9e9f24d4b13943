"""Firmware-equivalent device state machine.

Acquisition and filtering, uplink with in-line retries and store-and-forward
buffering, actuator command processing with staleness and replay guards,
periodic status updates, and health monitoring with safe mode and reset.
Sensors, transport, and time are injected so the same code runs against the
simulator or a real socket.
"""

from __future__ import annotations

import heapq
import json
from collections import deque
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from datetime import datetime, timezone
from typing import Any, Callable, Optional, Protocol

from . import wire

NORMAL = "normal"
SAFE = "safe"

ACCEPTED = "accepted"
REJECTED_STALE = "rejected_stale"
REJECTED_REPLAY = "rejected_replay"

LED_TARGETS = ("led1", "led2")

T_RANGE = (0.0, 50.0)
H_RANGE = (0.0, 100.0)
D_RANGE = (2.0, 400.0)
MEDIAN_WINDOW = 5
EMA_NEW_WEIGHT = 0.7
EMA_OLD_WEIGHT = 0.3


class AgentError(Exception):
    pass


class NoValidReadingYet(AgentError):
    """First ever frame is out of range; nothing valid to substitute."""


class UnknownTargetError(AgentError):
    pass


class Transport(Protocol):
    def send(self, msg: wire.WireMessage) -> bool:
        """Attempt one transmission; False means the attempt failed."""
        ...


@dataclass
class AgentConfig:
    server: str = "127.0.0.1:8787"
    token: str = "device-token"
    device_id: str = "ESP32_001"
    sampling_period_ms: int = 1000
    backoff_base_ms: int = 500
    backoff_factor: float = 2.0
    backoff_cap_ms: int = 8000
    inline_attempts: int = 3
    buffer_capacity: int = 1024
    staleness_window_ms: int = 5000
    status_interval_ms: int = 10_000
    health_interval_ms: int = 1000
    buffer_retry_ms: int = 30_000
    link_down_after_exhausted: int = 2
    link_silence_timeout_ms: int = 3000
    sync_timeout_ms: int = 15_000
    safe_mode_after_failures: int = 3

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, raw: dict) -> "AgentConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in raw.items() if k in known})


@dataclass
class SensorFrame:
    t_raw: float
    h_raw: float
    d_raw: float
    sample_time_ms: int


@dataclass
class ProcessedFrame:
    t: float
    h: float
    d: float
    sample_time_ms: int


@dataclass
class FilterState:
    t_filtered: float = 0.0
    h_filtered: float = 0.0
    # Holds the window minus the incoming sample: push/median/evict order
    # keeps at most 4 prior readings between frames.
    d_buffer: deque = field(default_factory=lambda: deque(maxlen=MEDIAN_WINDOW - 1))
    d_filtered: float = 0.0
    last_valid: Optional[ProcessedFrame] = None
    initialized: bool = False


def validate_ranges(t: float, h: float, d: float) -> tuple[bool, bool, bool]:
    """Inclusive range verdicts for the filtered triple."""
    return (
        T_RANGE[0] <= t <= T_RANGE[1],
        H_RANGE[0] <= h <= H_RANGE[1],
        D_RANGE[0] <= d <= D_RANGE[1],
    )


def acquire_and_filter(state: FilterState, frame: SensorFrame) -> ProcessedFrame:
    """Smooth one raw frame and enforce ranges.

    EMA for temperature/humidity (first frame seeds the filters), median of
    the last 5 readings for distance (raw passthrough during warm-up).
    Out-of-range fields fall back to the last valid reading; with no valid
    reading yet the frame is rejected via NoValidReadingYet.
    """
    if state.initialized:
        t_f = EMA_NEW_WEIGHT * frame.t_raw + EMA_OLD_WEIGHT * state.t_filtered
        h_f = EMA_NEW_WEIGHT * frame.h_raw + EMA_OLD_WEIGHT * state.h_filtered
    else:
        t_f = frame.t_raw
        h_f = frame.h_raw

    # Push, take the median once 5 samples exist, then evict the oldest.
    window = list(state.d_buffer) + [frame.d_raw]
    if len(window) >= MEDIAN_WINDOW:
        d_f = sorted(window)[MEDIAN_WINDOW // 2]
    else:
        d_f = frame.d_raw

    valid = validate_ranges(t_f, h_f, d_f)
    if not all(valid) and state.last_valid is None:
        raise NoValidReadingYet(f"first frame out of range: t={t_f} h={h_f} d={d_f}")

    state.t_filtered = t_f
    state.h_filtered = h_f
    state.initialized = True
    state.d_buffer.append(frame.d_raw)  # maxlen evicts the oldest
    state.d_filtered = d_f

    last = state.last_valid
    out = ProcessedFrame(
        t=t_f if valid[0] else last.t,
        h=h_f if valid[1] else last.h,
        d=d_f if valid[2] else last.d,
        sample_time_ms=frame.sample_time_ms,
    )
    state.last_valid = out
    return out


class UplinkBuffer:
    """Bounded store-and-forward FIFO; overflow drops the oldest frame."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._frames: deque[ProcessedFrame] = deque()
        self.drop_count = 0

    def push(self, frame: ProcessedFrame) -> None:
        if len(self._frames) >= self.capacity:
            self._frames.popleft()
            self.drop_count += 1
        self._frames.append(frame)

    def peek(self) -> ProcessedFrame:
        return self._frames[0]

    def pop(self) -> ProcessedFrame:
        return self._frames.popleft()

    def __len__(self):
        return len(self._frames)

    def snapshot(self) -> list[ProcessedFrame]:
        return list(self._frames)


@dataclass
class ActuatorState:
    led1: bool = False
    led2: bool = False

    def get(self, target: str) -> bool:
        return getattr(self, target)

    def set(self, target: str, value: bool) -> None:
        setattr(self, target, value)


@dataclass
class HealthState:
    link_ok: bool = True
    sync_ok: bool = True
    sensor_ok: bool = True
    consecutive_failures: int = 0
    mode: str = NORMAL
    last_successful_tx_ms: int = 0


@dataclass
class CommandEnvelope:
    target: str
    value: bool
    command_time_ms: int
    revision: int


@dataclass
class TxStats:
    frames_produced: int = 0
    frames_delivered: int = 0
    frames_delivered_first_pass: int = 0
    attempts_total: int = 0


@lru_cache(maxsize=8)
def _iso_second(seconds: int) -> str:
    dt = datetime.fromtimestamp(seconds, tz=timezone.utc)
    return f"{dt:%Y-%m-%dT%H:%M:%S}"


def iso_timestamp(ms: int) -> str:
    return f"{_iso_second(ms // 1000)}.{ms % 1000:03d}Z"


class DeviceAgent:
    """Deterministic, timer-driven device state machine.

    Drive it by delivering inbound messages with on_message() and calling
    step() at (or after) next_due_ms(); step processes the inbox and every
    due timer and returns the list of effects it produced.
    """

    def __init__(
        self,
        config: AgentConfig,
        transport: Transport,
        sensor: Callable[[int], SensorFrame],
        start_ms: int = 0,
        action_log: Optional[Callable[[dict], None]] = None,
    ):
        self.config = config
        self.transport = transport
        self.sensor = sensor
        self.start_ms = start_ms
        self.action_log = action_log

        self.filter_state = FilterState()
        self.actuators = ActuatorState()
        self.health = HealthState(last_successful_tx_ms=start_ms)
        self.buffer = UplinkBuffer(config.buffer_capacity)
        self.stats = TxStats()
        self.latest_frame: Optional[ProcessedFrame] = None
        self.last_accepted_revision: dict[str, int] = {}

        self._known_server_ms = 0
        self._known_local_ms = start_ms
        self._last_server_contact_ms = start_ms
        self._msg_id = 0
        self._inbox: list[wire.WireMessage] = []
        self._timers: list[tuple[int, int, str, Any]] = []
        self._timer_seq = 0
        self._started = False
        self._did_reset = False
        self._reconnect_delay_ms = config.backoff_base_ms
        self._consecutive_exhausted = 0
        self._buffer_retry_scheduled = False
        self._in_flight = 0
        self._effects: list[dict] = []

    # -- scheduling --------------------------------------------------------

    def _schedule(self, at_ms: int, kind: str, payload: Any = None) -> None:
        heapq.heappush(self._timers, (at_ms, self._timer_seq, kind, payload))
        self._timer_seq += 1

    def next_due_ms(self) -> Optional[int]:
        if self._inbox:
            return 0
        if not self._started:
            return self.start_ms
        return self._timers[0][0] if self._timers else None

    def on_message(self, msg: wire.WireMessage, now_ms: int) -> None:
        self._inbox.append(msg)

    # -- main entry --------------------------------------------------------

    def step(self, now_ms: int) -> list[dict]:
        """Process the inbox and every timer due at now_ms."""
        self._effects = []
        if not self._started:
            self._startup(now_ms)
        inbox, self._inbox = self._inbox, []
        for msg in inbox:
            self._handle_inbound(msg, now_ms)
        while self._timers and self._timers[0][0] <= now_ms:
            _, _, kind, payload = heapq.heappop(self._timers)
            if isinstance(payload, dict) and payload.get("cancelled"):
                continue
            getattr(self, f"_on_{kind}")(now_ms, payload)
        return self._effects

    def _startup(self, now_ms: int) -> None:
        self._started = True
        self._send_handshake(now_ms)
        self._schedule(now_ms, "sample")
        self._schedule(now_ms + self.config.status_interval_ms, "status")
        self._schedule(now_ms + self.config.health_interval_ms, "health")

    def _send_handshake(self, now_ms: int) -> None:
        self._send(wire.auth(self._next_id(), self.config.token), now_ms, "auth")
        for target in LED_TARGETS:
            self._send(wire.subscribe(self._next_id(), f"/leds/{target}"), now_ms, "subscribe")

    # -- inbound -----------------------------------------------------------

    def _handle_inbound(self, msg: wire.WireMessage, now_ms: int) -> None:
        self._last_server_contact_ms = now_ms
        self.health.sync_ok = True
        server_time = msg.payload.get("server_time_ms")
        if isinstance(server_time, int) and server_time > self._known_server_ms:
            self._known_server_ms = server_time
            self._known_local_ms = now_ms
        if msg.kind == wire.ERR and msg.payload.get("code") == wire.E_AUTH_REQUIRED:
            # Session was recycled server-side (e.g. heartbeat expiry).
            self._send_handshake(now_ms)
            return
        if msg.kind != wire.EVENT:
            return
        path = msg.payload.get("path", "")
        parts = path.strip("/").split("/")
        if len(parts) == 2 and parts[0] == "leds":
            value = msg.payload.get("value")
            if msg.payload.get("absent") or not isinstance(value, bool):
                return
            env = CommandEnvelope(
                target=parts[1],
                value=value,
                command_time_ms=int(msg.payload.get("server_time_ms", 0)),
                revision=int(msg.payload.get("revision", 0)),
            )
            try:
                self.handle_command(env, now_ms)
            except UnknownTargetError:
                self._log(now_ms, "cmd", {"outcome": "unknown_target", "target": env.target})

    def estimated_server_now_ms(self, now_ms: int) -> int:
        return self._known_server_ms + (now_ms - self._known_local_ms)

    def handle_command(self, env: CommandEnvelope, now_ms: int) -> str:
        """Apply or reject one actuator command. Returns the outcome."""
        if env.target not in LED_TARGETS:
            raise UnknownTargetError(env.target)
        age_ms = self.estimated_server_now_ms(now_ms) - env.command_time_ms
        if age_ms > self.config.staleness_window_ms:
            self._log(now_ms, "cmd", {"outcome": REJECTED_STALE, "target": env.target, "age_ms": age_ms})
            return REJECTED_STALE
        if env.revision <= self.last_accepted_revision.get(env.target, -1):
            self._log(now_ms, "cmd", {"outcome": REJECTED_REPLAY, "target": env.target, "revision": env.revision})
            return REJECTED_REPLAY
        self.actuators.set(env.target, env.value)
        self.last_accepted_revision[env.target] = env.revision
        self._effects.append(
            {"t": now_ms, "kind": "actuator", "target": env.target, "value": env.value, "revision": env.revision}
        )
        applied_at = self.estimated_server_now_ms(now_ms)
        ack_msg = wire.update(
            self._next_id(),
            [
                {
                    "path": f"/metadata/ack/{env.target}",
                    "value": {"revision": float(env.revision), "applied_at": float(applied_at)},
                }
            ],
        )
        if self.health.link_ok:
            self._send(ack_msg, now_ms, "command_ack")
        self._log(
            now_ms,
            "cmd",
            {"outcome": ACCEPTED, "target": env.target, "value": env.value, "revision": env.revision},
        )
        return ACCEPTED

    # -- sampling and uplink ----------------------------------------------

    def stop_sampling(self) -> None:
        """Stop producing frames; timers for retries and health keep running."""
        self._sampling_stopped = True

    def _on_sample(self, now_ms: int, _payload) -> None:
        if getattr(self, "_sampling_stopped", False):
            return
        frame = self.sensor(now_ms)
        try:
            processed = acquire_and_filter(self.filter_state, frame)
        except NoValidReadingYet:
            self.health.sensor_ok = False
            self._log(now_ms, "tx", {"outcome": "frame_skipped_invalid"})
        else:
            self.health.sensor_ok = True
            self.latest_frame = processed
            self.stats.frames_produced += 1
            self._start_tx(processed, now_ms)
        self._schedule(now_ms + self.config.sampling_period_ms, "sample")

    def _frame_msg(self, frame: ProcessedFrame, now_ms: int) -> wire.WireMessage:
        return wire.update(
            self._next_id(),
            [
                {"path": "/sensors/temperature", "value": frame.t},
                {"path": "/sensors/humidity", "value": frame.h},
                {"path": "/sensors/distance", "value": frame.d},
                {"path": "/metadata/last_update", "value": iso_timestamp(self.estimated_server_now_ms(now_ms))},
            ],
        )

    def _start_tx(self, frame: ProcessedFrame, now_ms: int) -> None:
        if not self.health.link_ok or self.health.mode == SAFE:
            self.buffer.push(frame)
            return
        task = {"frame": frame, "attempts": 0, "cancelled": False}
        self._in_flight += 1
        self._on_tx(now_ms, task)

    def _on_tx(self, now_ms: int, task: dict) -> None:
        frame = task["frame"]
        task["attempts"] += 1
        self.stats.attempts_total += 1
        ok = self._send(self._frame_msg(frame, now_ms), now_ms, "frame", count_effect=False)
        self._effects.append(
            {"t": now_ms, "kind": "tx_attempt", "attempt": task["attempts"], "ok": ok, "sample_time_ms": frame.sample_time_ms}
        )
        if ok:
            self._in_flight -= 1
            self.stats.frames_delivered += 1
            self.stats.frames_delivered_first_pass += 1
            self._tx_success(now_ms)
            self._log(now_ms, "tx", {"outcome": "delivered_first_pass", "attempts": task["attempts"]})
            return
        if task["attempts"] < self.config.inline_attempts and self.health.link_ok:
            delay = int(
                self.config.backoff_base_ms * self.config.backoff_factor ** (task["attempts"] - 1)
            )
            self._schedule(now_ms + delay, "tx", task)
            return
        # In-line budget exhausted (or the link went down mid-sequence).
        self._in_flight -= 1
        self.buffer.push(frame)
        self._schedule_buffer_retry(now_ms)
        self._log(now_ms, "tx", {"outcome": "buffered", "attempts": task["attempts"]})
        if task["attempts"] >= self.config.inline_attempts:
            self._consecutive_exhausted += 1
            if (
                self.health.link_ok
                and self._consecutive_exhausted >= self.config.link_down_after_exhausted
            ):
                self._connection_lost(now_ms)

    def _tx_success(self, now_ms: int) -> None:
        self.health.last_successful_tx_ms = now_ms
        self._consecutive_exhausted = 0
        self._drain_buffer(now_ms)

    def _schedule_buffer_retry(self, now_ms: int) -> None:
        if not self._buffer_retry_scheduled:
            self._buffer_retry_scheduled = True
            self._schedule(now_ms + self.config.buffer_retry_ms, "buffer_retry")

    def _on_buffer_retry(self, now_ms: int, _payload) -> None:
        self._buffer_retry_scheduled = False
        if self.health.link_ok and self.health.mode != SAFE:
            self._drain_buffer(now_ms)

    def _drain_buffer(self, now_ms: int) -> None:
        while len(self.buffer):
            frame = self.buffer.peek()
            ok = self._send(self._frame_msg(frame, now_ms), now_ms, "frame_drain", count_effect=False)
            self._effects.append(
                {"t": now_ms, "kind": "drain_attempt", "ok": ok, "sample_time_ms": frame.sample_time_ms}
            )
            if not ok:
                self._schedule_buffer_retry(now_ms)
                return
            self.buffer.pop()
            self.stats.frames_delivered += 1
            self.health.last_successful_tx_ms = now_ms
        self._log(now_ms, "tx", {"outcome": "buffer_cleared"})

    # -- connection management --------------------------------------------

    def _connection_lost(self, now_ms: int) -> None:
        self.health.link_ok = False
        self.health.consecutive_failures = 0
        self._reconnect_delay_ms = self.config.backoff_base_ms
        # Park any in-flight frames; their retry timers are cancelled.
        for entry in self._timers:
            payload = entry[3]
            if entry[2] == "tx" and isinstance(payload, dict) and not payload.get("cancelled"):
                payload["cancelled"] = True
                self._in_flight -= 1
                self.buffer.push(payload["frame"])
        self._log(now_ms, "recovery", {"event": "connection_lost"})
        self._schedule(now_ms + self._reconnect_delay_ms, "reconnect")

    def _on_reconnect(self, now_ms: int, _payload) -> None:
        if self.health.link_ok:
            return
        ok = self._send(wire.ping(self._next_id()), now_ms, "reconnect_probe")
        if ok:
            self._reconnected(now_ms)
            return
        self.health.consecutive_failures += 1
        if (
            self.health.consecutive_failures >= self.config.safe_mode_after_failures
            and self.health.mode == NORMAL
        ):
            self._enter_safe_mode(now_ms)
        self._reconnect_delay_ms = min(
            int(self._reconnect_delay_ms * self.config.backoff_factor),
            self.config.backoff_cap_ms,
        )
        self._schedule(now_ms + self._reconnect_delay_ms, "reconnect")

    def _reconnected(self, now_ms: int) -> None:
        self.health.link_ok = True
        self.health.consecutive_failures = 0
        self._consecutive_exhausted = 0
        self.health.last_successful_tx_ms = now_ms
        if self.health.mode == SAFE:
            self.health.mode = NORMAL
            self._log(now_ms, "mode", {"mode": NORMAL})
        if self._did_reset:
            self._did_reset = False
            self._send_handshake(now_ms)
        self._log(now_ms, "recovery", {"event": "reconnected"})
        self._drain_buffer(now_ms)

    def _enter_safe_mode(self, now_ms: int) -> None:
        self.health.mode = SAFE
        self._log(now_ms, "mode", {"mode": SAFE})
        self._full_reset(now_ms)

    def _full_reset(self, now_ms: int) -> None:
        """Reinitialize agent state; the uplink buffer survives the reset."""
        for entry in self._timers:
            payload = entry[3]
            if entry[2] == "tx" and isinstance(payload, dict) and not payload.get("cancelled"):
                payload["cancelled"] = True
                self._in_flight -= 1
                self.buffer.push(payload["frame"])
        self.filter_state = FilterState()
        self.actuators = ActuatorState()
        self.last_accepted_revision = {}
        self.latest_frame = None
        self._known_server_ms = 0
        self._known_local_ms = now_ms
        self._did_reset = True
        self._log(now_ms, "recovery", {"event": "full_reset"})

    # -- periodic status and health ---------------------------------------

    def _on_status(self, now_ms: int, _payload) -> None:
        if self.health.mode == SAFE:
            status: dict[str, Any] = {"mode": SAFE}
        else:
            status = {
                "mode": self.health.mode,
                "led1": self.actuators.led1,
                "led2": self.actuators.led2,
            }
            if self.latest_frame is not None:
                status.update(
                    temperature=self.latest_frame.t,
                    humidity=self.latest_frame.h,
                    distance=self.latest_frame.d,
                )
        msg = wire.update(self._next_id(), [{"path": "/metadata/status", "value": status}])
        if self.health.link_ok:
            self._send(msg, now_ms, "status")
        self._effects.append({"t": now_ms, "kind": "status", "status": status})
        self._schedule(now_ms + self.config.status_interval_ms, "status")

    def _on_health(self, now_ms: int, _payload) -> None:
        if (
            self.health.link_ok
            and now_ms - self.health.last_successful_tx_ms > self.config.link_silence_timeout_ms
        ):
            self._log(now_ms, "recovery", {"event": "link_silence"})
            self._connection_lost(now_ms)
        if now_ms - self._last_server_contact_ms > self.config.sync_timeout_ms:
            if self.health.sync_ok:
                self.health.sync_ok = False
                self._log(now_ms, "recovery", {"event": "sync_heartbeat_lost"})
        if len(self.buffer) >= 0.9 * self.config.buffer_capacity:
            self._log(now_ms, "recovery", {"event": "buffer_high_watermark", "size": len(self.buffer)})
        self._schedule(now_ms + self.config.health_interval_ms, "health")

    # -- plumbing ----------------------------------------------------------

    def _next_id(self) -> int:
        self._msg_id += 1
        return self._msg_id

    def _send(self, msg: wire.WireMessage, now_ms: int, label: str, count_effect: bool = True) -> bool:
        ok = self.transport.send(msg)
        if count_effect:
            self._effects.append({"t": now_ms, "kind": "send", "label": label, "msg_kind": msg.kind, "ok": ok})
        return ok

    def _log(self, now_ms: int, kind: str, detail: dict) -> None:
        if self.action_log is not None:
            self.action_log({"time_ms": now_ms, "kind": kind, "detail": detail})

    def conservation_ok(self) -> bool:
        return self.stats.frames_produced == (
            self.stats.frames_delivered + len(self.buffer) + self.buffer.drop_count + self._in_flight
        )


class FileActionLog:
    """Append-only JSONL local action log."""

    def __init__(self, path: str):
        self._fh = open(path, "a", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()
