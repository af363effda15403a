"""Length-prefixed binary codec for switch/controller messages.

Layout of every message::

    u32 length (big-endian, bytes that follow) | u8 kind | u64 sequence | body

Frames travel as ``u64 timestamp_us | u16 can_id | u8 dlc | 8 data bytes``,
so timestamps round-trip at microsecond resolution. Optional port and CAN id
fields use 0xFFFF for "any".
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

from ..can_codec import CanFrame, ContractError
from .flows import Action, FlowRule, Match

HEADER = struct.Struct(">IBQ")
LENGTH = struct.Struct(">I")
FRAME = struct.Struct(">QHB8s")
PORT = struct.Struct(">H")
FLOW_MOD = struct.Struct(">iHHB")
RULE_STATS = struct.Struct(">iHHBQQ")
COUNTS = struct.Struct(">QQH")
WILDCARD = 0xFFFF
HEADER_SIZE = HEADER.size  # 13
MAX_MESSAGE = 1 << 20


class Kind(IntEnum):
    PACKET_IN = 1
    FLOW_MOD = 2
    STATS_REQUEST = 3
    STATS_REPLY = 4
    ALERT = 5


class WireError(ValueError):
    def __init__(self, offset: int, reason: str):
        super().__init__(f"offset {offset}: {reason}")
        self.offset = offset
        self.reason = reason


@dataclass(frozen=True)
class PacketIn:
    in_port: int
    frame: CanFrame


@dataclass(frozen=True)
class FlowMod:
    priority: int
    match: Match
    action: Action

    def rule(self) -> FlowRule:
        return FlowRule(self.priority, self.match, self.action)


@dataclass(frozen=True)
class StatsRequest:
    pass


@dataclass(frozen=True)
class RuleStats:
    priority: int
    match: Match
    action: Action
    packets: int
    bytes: int


@dataclass(frozen=True)
class StatsReply:
    default_packets: int
    default_bytes: int
    rules: tuple[RuleStats, ...] = ()


@dataclass(frozen=True)
class Alert:
    text: str


Payload = PacketIn | FlowMod | StatsRequest | StatsReply | Alert

_KIND_OF = {PacketIn: Kind.PACKET_IN, FlowMod: Kind.FLOW_MOD, StatsRequest: Kind.STATS_REQUEST,
            StatsReply: Kind.STATS_REPLY, Alert: Kind.ALERT}


@dataclass(frozen=True)
class ControllerMsg:
    seq: int
    payload: Payload = field(default_factory=StatsRequest)

    @property
    def kind(self) -> Kind:
        return _KIND_OF[type(self.payload)]


def _opt(v: int | None) -> int:
    if v is None:
        return WILDCARD
    if not 0 <= v < WILDCARD:
        raise ContractError(f"field value {v} does not fit in 16 bits")
    return v


def _unopt(v: int) -> int | None:
    return None if v == WILDCARD else v


def encode_frame(frame: CanFrame) -> bytes:
    us = round(frame.timestamp * 1e6)
    if us < 0:
        raise ContractError("negative timestamps cannot be encoded")
    return FRAME.pack(us, frame.can_id, frame.dlc, frame.data)


def _decode_frame(buf: bytes, off: int) -> CanFrame:
    us, cid, dlc, data = FRAME.unpack_from(buf, off)
    try:
        return CanFrame(us / 1e6, cid, dlc, data)
    except ContractError as exc:
        raise WireError(off, str(exc)) from None


def _body(p: Payload) -> bytes:
    if isinstance(p, PacketIn):
        return PORT.pack(_opt(p.in_port)) + encode_frame(p.frame)
    if isinstance(p, FlowMod):
        return FLOW_MOD.pack(p.priority, _opt(p.match.in_port), _opt(p.match.can_id), int(p.action))
    if isinstance(p, StatsRequest):
        return b""
    if isinstance(p, StatsReply):
        parts = [COUNTS.pack(p.default_packets, p.default_bytes, len(p.rules))]
        for r in p.rules:
            parts.append(RULE_STATS.pack(r.priority, _opt(r.match.in_port), _opt(r.match.can_id),
                                         int(r.action), r.packets, r.bytes))
        return b"".join(parts)
    if isinstance(p, Alert):
        return p.text.encode("utf-8")
    raise ContractError(f"cannot encode payload {type(p).__name__}")


def encode(msg: ControllerMsg) -> bytes:
    body = _body(msg.payload)
    length = HEADER_SIZE - LENGTH.size + len(body)
    if length > MAX_MESSAGE:
        raise ContractError("message too large")
    return HEADER.pack(length, int(msg.kind), msg.seq) + body


def _need(buf: bytes, off: int, n: int, end: int, what: str) -> None:
    if off + n > end:
        raise WireError(off, f"truncated {what}: need {n} bytes, have {max(end - off, 0)}")


def _action(v: int, off: int) -> Action:
    try:
        return Action(v)
    except ValueError:
        raise WireError(off, f"unknown action {v}") from None


def _decode_body(kind: int, buf: bytes, off: int, end: int) -> Payload:
    n = end - off
    if kind == Kind.PACKET_IN:
        if n != PORT.size + FRAME.size:
            raise WireError(off, f"PACKET_IN body must be {PORT.size + FRAME.size} bytes, got {n}")
        (port,) = PORT.unpack_from(buf, off)
        return PacketIn(port, _decode_frame(buf, off + PORT.size))
    if kind == Kind.FLOW_MOD:
        if n != FLOW_MOD.size:
            raise WireError(off, f"FLOW_MOD body must be {FLOW_MOD.size} bytes, got {n}")
        prio, port, cid, act = FLOW_MOD.unpack_from(buf, off)
        return FlowMod(prio, Match(_unopt(port), _unopt(cid)), _action(act, off + 8))
    if kind == Kind.STATS_REQUEST:
        if n:
            raise WireError(off, "STATS_REQUEST carries no body")
        return StatsRequest()
    if kind == Kind.STATS_REPLY:
        _need(buf, off, COUNTS.size, end, "STATS_REPLY counts")
        dp, db, count = COUNTS.unpack_from(buf, off)
        pos = off + COUNTS.size
        if end - pos != count * RULE_STATS.size:
            raise WireError(pos, f"STATS_REPLY announces {count} rules but carries {end - pos} bytes")
        rules = []
        for _ in range(count):
            prio, port, cid, act, pk, by = RULE_STATS.unpack_from(buf, pos)
            rules.append(RuleStats(prio, Match(_unopt(port), _unopt(cid)), _action(act, pos + 8), pk, by))
            pos += RULE_STATS.size
        return StatsReply(dp, db, tuple(rules))
    if kind == Kind.ALERT:
        try:
            return Alert(bytes(buf[off:end]).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise WireError(off + exc.start, "alert text is not UTF-8") from None
    raise WireError(off - 9, f"unknown message kind {kind}")


def decode_from(buf: bytes, off: int = 0) -> tuple[ControllerMsg, int]:
    """Decode one message at ``off``; returns it with the offset just past it."""
    end = len(buf)
    _need(buf, off, LENGTH.size, end, "length prefix")
    (length,) = LENGTH.unpack_from(buf, off)
    if length < HEADER_SIZE - LENGTH.size:
        raise WireError(off, f"length {length} shorter than the message header")
    if length > MAX_MESSAGE:
        raise WireError(off, f"length {length} exceeds the {MAX_MESSAGE}-byte limit")
    stop = off + LENGTH.size + length
    _need(buf, off + LENGTH.size, length, end, "message")
    _, kind, seq = HEADER.unpack_from(buf, off)
    return ControllerMsg(seq, _decode_body(kind, buf, off + HEADER_SIZE, stop)), stop


def decode(buf: bytes) -> ControllerMsg:
    """Decode a buffer holding exactly one message."""
    msg, stop = decode_from(buf)
    if stop != len(buf):
        raise WireError(stop, f"{len(buf) - stop} trailing bytes")
    return msg


class StreamDecoder:
    """Incremental decoder for a byte stream that may split messages anywhere."""

    def __init__(self):
        self._buf = bytearray()
        self._consumed = 0

    def feed(self, data: bytes) -> list[ControllerMsg]:
        self._buf += data
        out = []
        while len(self._buf) >= LENGTH.size:
            (length,) = LENGTH.unpack_from(self._buf, 0)
            if length > MAX_MESSAGE or length < HEADER_SIZE - LENGTH.size:
                raise WireError(self._consumed, f"bad length prefix {length}")
            total = LENGTH.size + length
            if len(self._buf) < total:
                break
            try:
                msg, _ = decode_from(bytes(self._buf[:total]))
            except WireError as exc:
                raise WireError(self._consumed + exc.offset, exc.reason) from None
            out.append(msg)
            del self._buf[:total]
            self._consumed += total
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)
