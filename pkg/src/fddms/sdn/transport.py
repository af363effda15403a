"""Loopback TCP transport: ECUs, switch and controller talk over real sockets in one asyncio loop.

Every switch port is its own listening socket. ECU links carry PACKET_IN
messages in both directions. The switch mirrors each frame to the controller,
which answers with FLOW_MOD and ALERT messages on the same connection.
Latencies are wall-clock and depend on the host.
"""

from __future__ import annotations

import asyncio
import logging
import time

from ..can_codec import SignalCatalog, default_catalog
from .controller import Detector
from .scenario import NODE_PORTS, PORT_NODES, ROLES, Scenario, build_traffic
from .sim import Network, SimResult, _controller, build_latency_report, stats_reply
from .wire import ControllerMsg, FlowMod, PacketIn, StreamDecoder, decode, encode

log = logging.getLogger(__name__)
HOST = "127.0.0.1"


async def _read_messages(reader: asyncio.StreamReader, decoder: StreamDecoder):
    while True:
        chunk = await reader.read(65536)
        if not chunk:
            return
        for msg in decoder.feed(chunk):
            yield msg


class _SocketRun:
    def __init__(self, scn: Scenario, detector: Detector, catalog: SignalCatalog):
        self.scn = scn
        self.catalog = catalog
        self.traffic = build_traffic(scn, catalog)
        self.ctl = _controller(scn, detector, catalog, self.traffic)
        self.net = Network(scn, self.ctl, catalog)
        self.sent_at: dict[int, float] = {}
        self.transmission: dict[str, list[float]] = {}
        self.receiver_writers: dict[int, asyncio.StreamWriter] = {}
        self.ctl_writer: asyncio.StreamWriter | None = None  # switch -> controller
        self.ctl_reply: asyncio.StreamWriter | None = None  # controller -> switch
        self.verdict_done: dict[int, float] = {}
        self.servers: list[asyncio.Server] = []

    # -- switch side ----------------------------------------------------------

    async def _switch_port(self, port: int, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        if ROLES[PORT_NODES[port]] != "broadcaster":
            self.receiver_writers[port] = writer
        async for msg in _read_messages(reader, StreamDecoder()):
            if not isinstance(msg.payload, PacketIn):
                continue
            frame = msg.payload.frame
            receivers = self.net.forward(frame.timestamp, port, frame, msg.seq)
            data = encode(ControllerMsg(msg.seq, PacketIn(port, frame)))
            for name in receivers:
                w = self.receiver_writers.get(NODE_PORTS[name])
                if w is not None:
                    w.write(data)
            if self.ctl_writer is not None:
                self.ctl_writer.write(data)

    async def _switch_control(self, reader: asyncio.StreamReader):
        async for msg in _read_messages(reader, StreamDecoder()):
            if isinstance(msg.payload, FlowMod):
                self.net.table.flow_mod(msg.payload.rule())
                done = self.verdict_done.pop(msg.seq, None)
                if done is not None:
                    self.net.mitigation_seconds.append(time.perf_counter() - done)

    # -- controller side -------------------------------------------------------

    async def _controller_conn(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self.ctl_reply = writer
        async for msg in _read_messages(reader, StreamDecoder()):
            if not isinstance(msg.payload, PacketIn):
                continue
            for verdict, commands in self.ctl.ingest(msg.payload.in_port, msg.payload.frame):
                self._emit(verdict, commands, writer)

    def _emit(self, verdict, commands, writer: asyncio.StreamWriter) -> None:
        done = time.perf_counter()
        for wire in self.net.apply(verdict.time, verdict, commands):
            msg = decode(wire)
            if isinstance(msg.payload, FlowMod):
                self.verdict_done[msg.seq] = done
            writer.write(wire)

    # -- ECU side ---------------------------------------------------------------

    async def _receiver(self, port: int, reader: asyncio.StreamReader):
        async for msg in _read_messages(reader, StreamDecoder()):
            if isinstance(msg.payload, PacketIn):
                sent = self.sent_at.get(msg.seq)
                if sent is not None:
                    name = self.net.messages.get(msg.payload.frame.can_id, "?")
                    self.transmission.setdefault(name, []).append(time.perf_counter() - sent)

    async def run(self) -> SimResult:
        # one listening socket per switch port, plus the controller's
        handlers = {}
        for name, port in self.scn.ports.items():
            async def on_conn(r, w, port=port):
                await self._switch_port(port, r, w)
            handlers[port] = await asyncio.start_server(on_conn, HOST, 0)
        ctl_server = await asyncio.start_server(self._controller_conn, HOST, 0)
        self.servers = list(handlers.values()) + [ctl_server]

        ctl_port = ctl_server.sockets[0].getsockname()[1]
        c_reader, c_writer = await asyncio.open_connection(HOST, ctl_port)
        self.ctl_writer = c_writer
        control_task = asyncio.create_task(self._switch_control(c_reader))

        links: dict[int, tuple[asyncio.StreamReader, asyncio.StreamWriter]] = {}
        for port, server in handlers.items():
            links[port] = await asyncio.open_connection(HOST, server.sockets[0].getsockname()[1])
        while len(self.receiver_writers) < sum(1 for n in self.scn.nodes if ROLES[n] != "broadcaster"):
            await asyncio.sleep(0.001)
        rx_tasks = [asyncio.create_task(self._receiver(p, links[p][0])) for p in self.receiver_writers]

        emissions = self.traffic.emissions
        start = time.perf_counter()
        for k, em in enumerate(emissions):
            due = start + em.time / self.scn.time_scale
            delay = due - time.perf_counter()
            if delay > 0:
                await asyncio.sleep(delay)
            seq = self.net.next_seq()
            self.sent_at[seq] = time.perf_counter()
            links[em.port][1].write(encode(ControllerMsg(seq, PacketIn(em.port, em.frame))))
            if k % 64 == 0:
                await links[em.port][1].drain()
        await asyncio.sleep(0.05)
        if self.ctl_reply is not None:
            for verdict, commands in self.ctl.advance(float(self.scn.duration)):
                self._emit(verdict, commands, self.ctl_reply)
            await asyncio.sleep(0.05)

        for _, w in links.values():
            w.close()
        c_writer.close()
        for s in self.servers:
            s.close()
        for t in rx_tasks + [control_task]:
            t.cancel()
        await asyncio.gather(*rx_tasks, control_task, return_exceptions=True)

        report = build_latency_report(self.transmission, self.ctl.verdicts, self.net.mitigation_seconds, "socket")
        return SimResult(self.scn, self.net.events, self.net.storage, self.net.deliveries, self.ctl.verdicts,
                         self.net.table, report, len(emissions), self.net.forwarded,
                         stats_reply(self.net.table), self.traffic)


def run_sockets(scn: Scenario, detector: Detector, catalog: SignalCatalog | None = None) -> SimResult:
    """Run the scenario in real time (scaled by ``time_scale``) over loopback sockets."""
    return asyncio.run(_SocketRun(scn, detector, catalog or default_catalog()).run())
