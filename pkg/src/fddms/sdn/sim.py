"""Deterministic virtual-time run of the switched in-vehicle network, plus its logs and latency report."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..can_codec import SignalCatalog, default_catalog
from .controller import Controller, Detector, Verdict
from .flows import Action, FlowTable, switch_forward
from .scenario import NODE_PORTS, PORT_NODES, ROLES, Scenario, Traffic, build_traffic, ownership
from .wire import Alert, ControllerMsg, FlowMod, PacketIn, RuleStats, StatsReply, decode, encode

EVENT_HEADER = ["time", "node", "event", "frame", "can_id", "detail"]
STORAGE_HEADER = ["time", "in_port", "node", "frame", "can_id", "data", "verdict_window"]
LATENCY_HEADER = ["message", "transmission_ms", "detection_ms", "mitigation_ms", "overall_ms"]


@dataclass
class Event:
    time: float
    node: str
    event: str
    frame: int = -1
    can_id: int = -1
    detail: str = ""

    def row(self) -> list[str]:
        return [f"{self.time:.6f}", self.node, self.event, str(self.frame),
                f"{self.can_id:#05x}" if self.can_id >= 0 else "", self.detail]


@dataclass
class Delivery:
    time: float
    frame: int
    can_id: int
    in_port: int


@dataclass
class StoredFrame:
    time: float
    in_port: int
    frame: int
    can_id: int
    data: bytes
    verdict_window: int

    def row(self) -> list[str]:
        return [f"{self.time:.6f}", str(self.in_port), PORT_NODES.get(self.in_port, "?"), str(self.frame),
                f"{self.can_id:#05x}", self.data.hex(), str(self.verdict_window)]


@dataclass
class LatencyRow:
    message: str
    transmission_ms: float
    detection_ms: float
    mitigation_ms: float

    @property
    def overall_ms(self) -> float:
        return self.transmission_ms + self.detection_ms + self.mitigation_ms

    def row(self) -> list[str]:
        return [self.message] + [f"{v:.4f}" for v in (self.transmission_ms, self.detection_ms,
                                                      self.mitigation_ms, self.overall_ms)]


@dataclass
class LatencyReport:
    rows: list[LatencyRow]
    transport: str
    mitigations: int = 0

    @property
    def average(self) -> LatencyRow:
        if not self.rows:
            return LatencyRow("Average", 0.0, 0.0, 0.0)
        return LatencyRow("Average", *(float(np.mean([getattr(r, k) for r in self.rows]))
                                       for k in ("transmission_ms", "detection_ms", "mitigation_ms")))

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LATENCY_HEADER)
            for r in self.rows + [self.average]:
                w.writerow(r.row())


def build_latency_report(transmission: dict[str, list[float]], verdicts: list[Verdict],
                         mitigation: list[float], transport: str) -> LatencyReport:
    """All inputs in seconds. Detection and mitigation are shared across message types."""
    timed = [v.detection_seconds for v in verdicts if not math.isnan(v.probability)]
    det = 1000.0 * float(np.mean(timed)) if timed else 0.0
    mit = 1000.0 * float(np.mean(mitigation)) if mitigation else 0.0
    rows = [LatencyRow(msg, 1000.0 * float(np.mean(v)) if v else 0.0, det, mit)
            for msg, v in sorted(transmission.items())]
    return LatencyReport(rows, transport, len(mitigation))


@dataclass
class SimResult:
    scenario: Scenario
    events: list[Event]
    storage: list[StoredFrame]
    deliveries: dict[str, list[Delivery]]
    verdicts: list[Verdict]
    table: FlowTable
    latency: LatencyReport
    frames_emitted: int
    frames_forwarded: int
    stats: StatsReply | None = None
    traffic: Traffic | None = field(default=None, repr=False)

    def first_attack_time(self) -> float | None:
        hits = [v.time for v in self.verdicts if v.attack]
        return min(hits) if hits else None

    def write_events(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(EVENT_HEADER)
            for e in self.events:
                w.writerow(e.row())

    def write_storage(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(STORAGE_HEADER)
            for s in self.storage:
                w.writerow(s.row())


def stats_reply(table: FlowTable) -> StatsReply:
    return StatsReply(table.default_packets, table.default_bytes,
                      tuple(RuleStats(r.priority, r.match, r.action, r.packets, r.bytes) for r in table.rules))


class Network:
    """Switch state shared by both transports: forwarding, logging and command handling."""

    def __init__(self, scn: Scenario, controller: Controller, catalog: SignalCatalog):
        self.scn = scn
        self.controller = controller
        self.messages = catalog.messages()
        self.table = FlowTable()
        self.ports = tuple(sorted(scn.ports.values()))
        self.events: list[Event] = []
        self.storage: list[StoredFrame] = []
        self.deliveries: dict[str, list[Delivery]] = {n: [] for n in scn.nodes if ROLES[n] != "broadcaster"}
        self.seq = 0
        self.forwarded = 0
        self.mitigation_seconds: list[float] = []

    def next_seq(self) -> int:
        self.seq += 1
        return self.seq

    def forward(self, now: float, port: int, frame, frame_no: int) -> list[str]:
        """Switch one frame; returns the receiving node names."""
        node = PORT_NODES[port]
        self.events.append(Event(now, node, "tx", frame_no, frame.can_id))
        res = switch_forward(self.table, frame, port, self.ports)
        self.forwarded += 1
        receivers = []
        if res.action is Action.REDIRECT_STORAGE:
            window = self.controller.mitigated.get(port, -1)
            self.storage.append(StoredFrame(now, port, frame_no, frame.can_id, frame.data, window))
            self.events.append(Event(now, "STORAGE", "store", frame_no, frame.can_id))
        elif res.action is Action.DROP:
            self.events.append(Event(now, "SWITCH", "drop", frame_no, frame.can_id))
        for p in res.delivered:
            name = PORT_NODES.get(p)
            if name in self.deliveries:
                self.deliveries[name].append(Delivery(now, frame_no, frame.can_id, port))
                self.events.append(Event(now, name, "rx", frame_no, frame.can_id))
                receivers.append(name)
        return receivers

    def apply(self, now: float, verdict: Verdict, commands: list) -> list[bytes]:
        """Log a verdict and carry out its commands; returns the encoded control messages."""
        label = "attack" if verdict.attack else "normal"
        if not math.isnan(verdict.probability):
            self.events.append(Event(now, "CONTROLLER", "verdict", verdict.window_id, -1,
                                     f"{label} p={verdict.probability:.4f}"))
        wires = []
        for cmd in commands:
            wires.append(encode(ControllerMsg(self.next_seq(), cmd)))
            if isinstance(cmd, FlowMod):
                self.events.append(Event(now, "CONTROLLER", "flow_mod", verdict.window_id, -1,
                                         f"port={cmd.match.in_port} action={cmd.action.name}"))
            elif isinstance(cmd, Alert):
                self.events.append(Event(now, "CONTROLLER", "alert", verdict.window_id, -1, cmd.text))
        return wires

    def install(self, wire: bytes) -> None:
        msg = decode(wire)
        if isinstance(msg.payload, FlowMod):
            self.table.flow_mod(msg.payload.rule())


def _controller(scn: Scenario, detector: Detector, catalog: SignalCatalog, traffic: Traffic) -> Controller:
    ctl = Controller(detector, ownership(catalog), catalog, threshold=scn.threshold)
    if scn.prefill:
        ctl.prefill(traffic.history)
    return ctl


def run_virtual(scn: Scenario, detector: Detector, catalog: SignalCatalog | None = None,
                traffic: Traffic | None = None) -> SimResult:
    """Single-threaded event loop over the scheduled emissions.

    Controller ticks fire before any frame stamped at or after the tick, and
    FLOW_MODs take effect before the next frame is switched. Transmission
    latency is the modelled two-hop link delay; detection and mitigation
    times are measured on the wall clock.
    """
    catalog = catalog or default_catalog()
    traffic = traffic or build_traffic(scn, catalog)
    ctl = _controller(scn, detector, catalog, traffic)
    net = Network(scn, ctl, catalog)
    delay = 2 * scn.link_delay_ms / 1000.0
    transmission: dict[str, list[float]] = {}

    def handle(results):
        for verdict, commands in results:
            started = time.perf_counter()
            wires = net.apply(verdict.time, verdict, commands)
            installed = False
            for w in wires:
                net.install(w)
                installed = installed or isinstance(decode(w).payload, FlowMod)
            if installed:
                net.mitigation_seconds.append(time.perf_counter() - started)

    for em in traffic.emissions:
        handle(ctl.advance(em.time))
        frame_no = net.next_seq()
        receivers = net.forward(em.time, em.port, em.frame, frame_no)
        if receivers:
            transmission.setdefault(net.messages.get(em.frame.can_id, f"{em.frame.can_id:#05x}"), []).append(delay)
        mirrored = decode(encode(ControllerMsg(frame_no, PacketIn(em.port, em.frame)))).payload
        handle(ctl.ingest(mirrored.in_port, mirrored.frame))
    handle(ctl.advance(float(scn.duration)))
    stats = decode(encode(ControllerMsg(net.next_seq(), stats_reply(net.table)))).payload
    report = build_latency_report(transmission, ctl.verdicts, net.mitigation_seconds, "virtual")
    return SimResult(scn, net.events, net.storage, net.deliveries, ctl.verdicts, net.table, report,
                     len(traffic.emissions), net.forwarded, stats, traffic)


def run_simulation(scn: Scenario, detector: Detector, catalog: SignalCatalog | None = None) -> SimResult:
    if scn.transport == "socket":
        from .transport import run_sockets

        return run_sockets(scn, detector, catalog)
    return run_virtual(scn, detector, catalog)

