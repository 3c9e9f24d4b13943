"""Deterministic discrete-event simulation of the whole platform.

A virtual clock drives the sync server, a device agent, dashboard-like
subscriber clients, and a command script over fault-injecting links
(seeded drops, delay jitter, partition windows). The experiment runner
measures delivery rates, control latency, and recovery times; identical
(config, seed) pairs produce byte-identical reports and traces.
"""

from __future__ import annotations

import heapq
import json
import math
import random
from dataclasses import dataclass, field, asdict
from typing import Any, Callable, Optional

from . import wire
from .agent import AgentConfig, DeviceAgent, SensorFrame
from .datatree import DataTree
from .persistence import MemoryCommitLog
from .rules import default_ruleset
from .server import SyncServerCore, TokenInfo

DEVICE_TOKEN = "sim-device-token"
CLIENT_TOKEN = "sim-client-token"


class ConfigInvalid(Exception):
    pass


# -- virtual time ------------------------------------------------------------


class SimClock:
    """Event queue ordered by (time, insertion sequence); time never goes back."""

    def __init__(self):
        self.now_ms = 0
        self._heap: list[tuple[int, int, Callable[[], None]]] = []
        self._seq = 0

    def schedule(self, at_ms: int, fn: Callable[[], None]) -> None:
        if at_ms < self.now_ms:
            at_ms = self.now_ms
        heapq.heappush(self._heap, (int(at_ms), self._seq, fn))
        self._seq += 1

    def run_until(self, t_ms: int) -> None:
        while self._heap and self._heap[0][0] <= t_ms:
            at, _, fn = heapq.heappop(self._heap)
            self.now_ms = at
            fn()
        self.now_ms = max(self.now_ms, t_ms)


# -- links -------------------------------------------------------------------


@dataclass
class LinkConfig:
    delay_ms: int = 50
    jitter_ms: int = 0
    drop_prob: float = 0.0
    partitions: list[list[int]] = field(default_factory=list)  # [start_ms, end_ms)
    partition_mode: str = "drop"  # "drop" | "queue"

    def validate(self) -> None:
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ConfigInvalid(f"drop_prob out of [0,1]: {self.drop_prob}")
        if self.partition_mode not in ("drop", "queue"):
            raise ConfigInvalid(f"unknown partition_mode {self.partition_mode!r}")
        for w in self.partitions:
            if len(w) != 2 or w[0] >= w[1]:
                raise ConfigInvalid(f"bad partition window {w!r}")


class SimLink:
    """Unidirectional channel: seeded drops, delay (+jitter), partitions,
    FIFO delivery."""

    def __init__(
        self,
        clock: SimClock,
        deliver: Callable[[wire.WireMessage], None],
        cfg: LinkConfig,
        rng: random.Random,
        name: str = "",
        trace: Optional[list] = None,
    ):
        self.clock = clock
        self.deliver = deliver
        self.cfg = cfg
        self.rng = rng
        self.name = name
        self.trace = trace
        self._last_delivery_ms = 0
        self.sent = 0
        self.dropped = 0

    def _partition_end(self, now: int) -> Optional[int]:
        for start, end in self.cfg.partitions:
            if start <= now < end:
                return end
        return None

    def send(self, msg: wire.WireMessage) -> bool:
        now = self.clock.now_ms
        end = self._partition_end(now)
        if end is not None:
            if self.cfg.partition_mode == "drop":
                self.dropped += 1
                self._trace(now, "drop_partition", msg)
                return False
            base = end
        else:
            if self.cfg.drop_prob and self.rng.random() < self.cfg.drop_prob:
                self.dropped += 1
                self._trace(now, "drop_random", msg)
                return False
            base = now
        delay = self.cfg.delay_ms
        if self.cfg.jitter_ms:
            delay += int(round(self.rng.uniform(-self.cfg.jitter_ms, self.cfg.jitter_ms)))
        at = max(base + delay, self._last_delivery_ms)  # FIFO per direction
        self._last_delivery_ms = at
        self.sent += 1
        self._trace(now, "send", msg, at)
        self.clock.schedule(at, lambda m=msg: self._deliver(m))
        return True

    def _deliver(self, msg: wire.WireMessage) -> None:
        self._trace(self.clock.now_ms, "deliver", msg)
        self.deliver(msg)

    def _trace(self, t: int, action: str, msg: wire.WireMessage, at: Optional[int] = None) -> None:
        if self.trace is not None:
            rec = {"t": t, "link": self.name, "action": action, "kind": msg.kind, "msg_id": msg.msg_id}
            if at is not None:
                rec["deliver_at"] = at
            if msg.kind == wire.EVENT:
                rec["revision"] = msg.payload.get("revision")
                rec["path"] = msg.payload.get("path")
            self.trace.append(rec)


# -- synthetic sensors -------------------------------------------------------


@dataclass
class SignalConfig:
    kind: str = "constant"  # constant | sine | walk
    base: float = 0.0
    amplitude: float = 0.0
    period_ms: int = 60_000
    step: float = 0.1
    noise: float = 0.0


@dataclass
class SensorConfig:
    temperature: SignalConfig = field(default_factory=lambda: SignalConfig(base=23.2))
    humidity: SignalConfig = field(default_factory=lambda: SignalConfig(base=72.2))
    distance: SignalConfig = field(default_factory=lambda: SignalConfig(base=17.68))
    outlier_prob: float = 0.0
    outlier_lo: float = 2.0
    outlier_hi: float = 400.0


class SensorModel:
    """Seeded per-channel signal generator with optional distance outliers."""

    def __init__(self, cfg: SensorConfig, rng: random.Random):
        self.cfg = cfg
        self.rng = rng
        self._walk: dict[str, float] = {}

    def _channel(self, name: str, sig: SignalConfig, t_ms: int) -> float:
        if sig.kind == "constant":
            v = sig.base
        elif sig.kind == "sine":
            v = sig.base + sig.amplitude * math.sin(2 * math.pi * t_ms / sig.period_ms)
        elif sig.kind == "walk":
            v = self._walk.get(name, sig.base) + self.rng.uniform(-sig.step, sig.step)
            self._walk[name] = v
        else:
            raise ConfigInvalid(f"unknown signal kind {sig.kind!r}")
        if sig.noise:
            v += self.rng.uniform(-sig.noise, sig.noise)
        return v

    def sample(self, t_ms: int) -> SensorFrame:
        c = self.cfg
        d = self._channel("distance", c.distance, t_ms)
        if c.outlier_prob and self.rng.random() < c.outlier_prob:
            d = self.rng.uniform(c.outlier_lo, c.outlier_hi)
        return SensorFrame(
            t_raw=self._channel("temperature", c.temperature, t_ms),
            h_raw=self._channel("humidity", c.humidity, t_ms),
            d_raw=d,
            sample_time_ms=t_ms,
        )


# -- experiment config and report -------------------------------------------


@dataclass
class ExperimentConfig:
    duration_ms: int = 60_000
    seed: int = 0
    device_link: LinkConfig = field(default_factory=LinkConfig)
    client_link: LinkConfig = field(default_factory=lambda: LinkConfig(delay_ms=5))
    sensors: SensorConfig = field(default_factory=SensorConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    agent_enabled: bool = True
    n_subscribers: int = 0
    subscribe_path: str = "/"
    commands: list[list[Any]] = field(default_factory=list)  # [t_ms, target, value]
    load_commands_per_sec: float = 0.0
    load_path: str = "/leds/led1"
    drain_ms: int = 600_000
    record_trace: bool = False

    def validate(self) -> None:
        if self.duration_ms <= 0:
            raise ConfigInvalid("duration_ms must be positive")
        self.device_link.validate()
        self.client_link.validate()
        for cmd in self.commands:
            if len(cmd) != 3 or cmd[1] not in ("led1", "led2") or not isinstance(cmd[2], bool):
                raise ConfigInvalid(f"bad command entry {cmd!r}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        if "device_link" in raw:
            raw["device_link"] = LinkConfig(**raw["device_link"])
        if "client_link" in raw:
            raw["client_link"] = LinkConfig(**raw["client_link"])
        if "sensors" in raw:
            s = dict(raw["sensors"])
            for ch in ("temperature", "humidity", "distance"):
                if ch in s:
                    s[ch] = SignalConfig(**s[ch])
            raw["sensors"] = SensorConfig(**s)
        if "agent" in raw:
            raw["agent"] = AgentConfig.from_json(raw["agent"])
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in raw.items() if k in known})


@dataclass
class MetricsReport:
    duration_ms: int = 0
    seed: int = 0
    frames_produced: int = 0
    frames_delivered: int = 0
    frames_delivered_first_pass: int = 0
    frames_buffered_at_end: int = 0
    frames_dropped: int = 0
    first_pass_success_rate: float = 0.0
    eventual_delivery_rate: float = 0.0
    control_commands_issued: int = 0
    control_commands_accepted: int = 0
    control_latency_mean_ms: float = 0.0
    control_latency_p50_ms: float = 0.0
    control_latency_p95_ms: float = 0.0
    recovery_times_ms: list[float] = field(default_factory=list)
    commits: int = 0
    events_generated: int = 0
    events_delivered: int = 0
    event_loss_count: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def format_table(self) -> str:
        rows = [
            ("Data Transmission Success (%)", f"{100 * self.first_pass_success_rate:.1f}"),
            ("Eventual Delivery (%)", f"{100 * self.eventual_delivery_rate:.1f}"),
            ("Control Command Latency (s)", f"{self.control_latency_mean_ms / 1000:.1f}"),
            ("Control Latency p95 (s)", f"{self.control_latency_p95_ms / 1000:.1f}"),
            (
                "Network Recovery Time (s)",
                ", ".join(f"{r / 1000:.1f}" for r in self.recovery_times_ms) or "n/a",
            ),
            ("Frames produced/delivered", f"{self.frames_produced}/{self.frames_delivered}"),
            ("Frames buffered/dropped", f"{self.frames_buffered_at_end}/{self.frames_dropped}"),
            ("Commits", str(self.commits)),
            ("Events generated/delivered", f"{self.events_generated}/{self.events_delivered}"),
            ("Event loss", str(self.event_loss_count)),
        ]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)


@dataclass
class ExperimentResult:
    report: MetricsReport
    subscriber_revisions: list[list[int]]
    trace: list[dict]
    conservation_violations: int
    latencies_ms: list[float]
    tree: DataTree

    def trace_jsonl(self) -> str:
        return "\n".join(json.dumps(r, sort_keys=True, separators=(",", ":")) for r in self.trace)


def percentile(sorted_values: list[float], q: float) -> float:
    if not sorted_values:
        return 0.0
    idx = max(0, math.ceil(q * len(sorted_values)) - 1)
    return sorted_values[idx]


# -- the runner --------------------------------------------------------------


class _SimTransport:
    def __init__(self, link: SimLink):
        self.link = link

    def send(self, msg: wire.WireMessage) -> bool:
        return self.link.send(msg)


class _Subscriber:
    def __init__(self, sid: str):
        self.sid = sid
        self.revisions: list[int] = []
        self.events = 0

    def on_message(self, msg: wire.WireMessage) -> None:
        if msg.kind == wire.EVENT:
            self.events += 1
            self.revisions.append(int(msg.payload["revision"]))


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    config.validate()
    clock = SimClock()
    trace: Optional[list] = [] if config.record_trace else None

    def rng(stream: int) -> random.Random:
        return random.Random(config.seed * 1_000_003 + stream)

    registry = {
        DEVICE_TOKEN: TokenInfo(principal=config.agent.device_id, role="device"),
        CLIENT_TOKEN: TokenInfo(principal="sim-client", role="user"),
    }
    server = SyncServerCore(
        rules=default_ruleset(), registry=registry, commit_log=MemoryCommitLog()
    )

    links_out: dict[str, SimLink] = {}
    subscribers: list[_Subscriber] = []
    events_generated = 0
    successful_uplink_ms: list[int] = []
    applied_by_revision: dict[int, int] = {}
    issued_by_msgid: dict[int, int] = {}
    issue_time_by_revision: dict[int, int] = {}

    events_for_subs = [0]

    def route(outbound) -> None:
        nonlocal events_generated
        for sid, msg in outbound:
            if msg.kind == wire.EVENT:
                events_generated += 1
                if sid.startswith("sub"):
                    events_for_subs[0] += 1
            link = links_out.get(sid)
            if link is not None:
                link.send(msg)

    def make_uplink(sid: str, cfg: LinkConfig, stream: int, name: str) -> SimLink:
        def deliver(msg: wire.WireMessage) -> None:
            if sid not in server.sessions:
                server.open_session(clock.now_ms, sid)
            route(server.handle_message(sid, msg, clock.now_ms))

        return SimLink(clock, deliver, cfg, rng(stream), name=name, trace=trace)

    # ---- device agent ----
    agent: Optional[DeviceAgent] = None
    if config.agent_enabled:
        device_sid = server.open_session(0, "device")
        device_up = make_uplink("device", config.device_link, 11, "device-up")
        agent_cfg = config.agent
        agent_cfg.token = DEVICE_TOKEN
        sensor_model = SensorModel(config.sensors, rng(12))
        agent = DeviceAgent(agent_cfg, _SimTransport(device_up), sensor_model.sample, start_ms=0)

        pending_wakeup: list[Optional[int]] = [None]

        def pump_agent() -> None:
            pending_wakeup[0] = None
            effects = agent.step(clock.now_ms)
            for eff in effects:
                if eff["kind"] == "actuator":
                    applied_by_revision.setdefault(eff["revision"], eff["t"])
                elif eff["kind"] in ("tx_attempt", "drain_attempt") and eff["ok"]:
                    successful_uplink_ms.append(eff["t"])
            arm_wakeup()

        def arm_wakeup() -> None:
            due = agent.next_due_ms()
            if due is None:
                return
            due = max(due, clock.now_ms)
            if pending_wakeup[0] is None or due < pending_wakeup[0]:
                pending_wakeup[0] = due
                clock.schedule(due, lambda d=due: fire_wakeup(d))

        def fire_wakeup(due: int) -> None:
            if pending_wakeup[0] == due:
                pump_agent()

        def deliver_to_agent(msg: wire.WireMessage) -> None:
            agent.on_message(msg, clock.now_ms)
            pump_agent()

        links_out["device"] = SimLink(
            clock, deliver_to_agent, config.device_link, rng(13), name="device-down", trace=trace
        )
        clock.schedule(0, pump_agent)

    # ---- subscriber clients ----
    for i in range(config.n_subscribers):
        sid = f"sub{i}"
        server.open_session(0, sid)
        sub = _Subscriber(sid)
        subscribers.append(sub)
        up = make_uplink(sid, config.client_link, 100 + i, f"{sid}-up")
        links_out[sid] = SimLink(
            clock, sub.on_message, config.client_link, rng(200 + i), name=f"{sid}-down", trace=trace
        )

        def connect(up=up, i=i) -> None:
            up.send(wire.auth(1, CLIENT_TOKEN))
            up.send(wire.subscribe(2, config.subscribe_path))

        clock.schedule(0, connect)

    # ---- controller issuing scripted commands ----
    latencies: list[float] = []
    if config.commands:
        server.open_session(0, "controller")
        ctrl_up = make_uplink("controller", config.client_link, 21, "controller-up")
        ctrl_msg_id = [100]

        def on_ctrl_message(msg: wire.WireMessage) -> None:
            if msg.kind == wire.ACK and "revision" in msg.payload:
                issued = issued_by_msgid.pop(msg.payload["msg_id"], None)
                if issued is not None:
                    issue_time_by_revision[msg.payload["revision"]] = issued

        links_out["controller"] = SimLink(
            clock, on_ctrl_message, config.client_link, rng(22), name="controller-down", trace=trace
        )
        clock.schedule(0, lambda: ctrl_up.send(wire.auth(1, CLIENT_TOKEN)))

        def issue(target: str, value: bool) -> None:
            ctrl_msg_id[0] += 1
            mid = ctrl_msg_id[0]
            issued_by_msgid[mid] = clock.now_ms
            ctrl_up.send(wire.put(mid, f"/leds/{target}", value))

        for t_ms, target, value in config.commands:
            clock.schedule(int(t_ms), lambda tg=target, v=value: issue(tg, v))

    # ---- background commit load ----
    if config.load_commands_per_sec > 0:
        server.open_session(0, "load")
        load_up = make_uplink("load", config.client_link, 31, "load-up")
        links_out["load"] = SimLink(
            clock, lambda msg: None, config.client_link, rng(32), name="load-down", trace=trace
        )
        interval = 1000.0 / config.load_commands_per_sec
        n_loads = int(config.duration_ms / interval)
        clock.schedule(0, lambda: load_up.send(wire.auth(1, CLIENT_TOKEN)))

        state = {"i": 0}

        def fire_load() -> None:
            state["i"] += 1
            load_up.send(wire.put(10 + state["i"], config.load_path, state["i"] % 2 == 0))

        for i in range(n_loads):
            clock.schedule(int(round((i + 1) * interval)), fire_load)

    # ---- periodic session expiry and conservation audit ----
    conservation_violations = [0]

    def audit() -> None:
        server.expire_sessions(clock.now_ms)
        if agent is not None and not agent.conservation_ok():
            conservation_violations[0] += 1
        clock.schedule(clock.now_ms + 1000, audit)

    clock.schedule(1000, audit)

    # ---- run to duration, then drain the uplink buffer ----
    clock.run_until(config.duration_ms)
    if agent is not None:
        agent.stop_sampling()
        deadline = config.duration_ms + config.drain_ms
        while clock.now_ms < deadline and (len(agent.buffer) or agent._in_flight):
            clock.run_until(min(clock.now_ms + 1000, deadline))
        clock.run_until(clock.now_ms + 2 * config.device_link.delay_ms + 10)

    # ---- metrics ----
    report = MetricsReport(duration_ms=config.duration_ms, seed=config.seed)
    if agent is not None:
        st = agent.stats
        report.frames_produced = st.frames_produced
        report.frames_delivered = st.frames_delivered
        report.frames_delivered_first_pass = st.frames_delivered_first_pass
        report.frames_buffered_at_end = len(agent.buffer)
        report.frames_dropped = agent.buffer.drop_count
        if st.frames_produced:
            report.first_pass_success_rate = st.frames_delivered_first_pass / st.frames_produced
            report.eventual_delivery_rate = st.frames_delivered / st.frames_produced

    for rev, applied in sorted(applied_by_revision.items()):
        issued = issue_time_by_revision.get(rev)
        if issued is not None:
            latencies.append(float(applied - issued))
    latencies.sort()
    report.control_commands_issued = len(config.commands)
    report.control_commands_accepted = len(latencies)
    if latencies:
        report.control_latency_mean_ms = sum(latencies) / len(latencies)
        report.control_latency_p50_ms = percentile(latencies, 0.5)
        report.control_latency_p95_ms = percentile(latencies, 0.95)

    for start, end in config.device_link.partitions:
        after = [t for t in successful_uplink_ms if t >= end]
        if after:
            report.recovery_times_ms.append(float(after[0] - start))

    report.commits = server.tree.revision
    report.events_generated = events_generated
    report.events_delivered = sum(s.events for s in subscribers)
    # Loss is generated-minus-delivered over subscriber sessions only.
    report.event_loss_count = max(0, events_for_subs[0] - report.events_delivered)

    return ExperimentResult(
        report=report,
        subscriber_revisions=[list(s.revisions) for s in subscribers],
        trace=trace if trace is not None else [],
        conservation_violations=conservation_violations[0],
        latencies_ms=latencies,
        tree=server.tree,
    )


def measure_control_latency(result: ExperimentResult) -> dict:
    """Latency distribution over accepted commands of a finished run."""
    lat = sorted(result.latencies_ms)
    return {
        "count": len(lat),
        "mean_ms": sum(lat) / len(lat) if lat else 0.0,
        "p50_ms": percentile(lat, 0.5),
        "p95_ms": percentile(lat, 0.95),
    }
