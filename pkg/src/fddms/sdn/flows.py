"""Match-action flow table for the CAN-bus switch."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

from ..can_codec import CanFrame, ContractError

STORAGE_PORT = 0


class Action(IntEnum):
    BROADCAST = 0
    REDIRECT_STORAGE = 1
    DROP = 2


@dataclass(frozen=True)
class Match:
    """``None`` fields are wildcards."""

    in_port: int | None = None
    can_id: int | None = None

    def matches(self, frame: CanFrame, in_port: int) -> bool:
        return ((self.in_port is None or self.in_port == in_port)
                and (self.can_id is None or self.can_id == frame.can_id))


@dataclass
class FlowRule:
    priority: int
    match: Match
    action: Action
    packets: int = 0
    bytes: int = 0
    last_matched: float | None = None

    def __post_init__(self):
        self.action = Action(self.action)

    def hit(self, frame: CanFrame) -> None:
        self.packets += 1
        self.bytes += frame.dlc
        self.last_matched = frame.timestamp


@dataclass
class ForwardResult:
    action: Action
    delivered: tuple[int, ...]
    rule: FlowRule | None


@dataclass
class FlowTable:
    rules: list[FlowRule] = field(default_factory=list)
    default_action: Action = Action.BROADCAST
    default_packets: int = 0
    default_bytes: int = 0

    def lookup(self, frame: CanFrame, in_port: int) -> FlowRule | None:
        """Highest priority wins; among equals the oldest rule does."""
        best = None
        for rule in self.rules:
            if rule.match.matches(frame, in_port) and (best is None or rule.priority > best.priority):
                best = rule
        return best

    def flow_mod(self, rule: FlowRule) -> FlowTable:
        """Insert ``rule``; an existing rule with the same match and priority is overwritten with fresh stats."""
        for i, old in enumerate(self.rules):
            if old.match == rule.match and old.priority == rule.priority:
                self.rules[i] = FlowRule(rule.priority, rule.match, rule.action)
                return self
        self.rules.append(FlowRule(rule.priority, rule.match, rule.action))
        return self

    def total_packets(self) -> int:
        return self.default_packets + sum(r.packets for r in self.rules)


def flow_mod(table: FlowTable, rule: FlowRule) -> FlowTable:
    return table.flow_mod(rule)


def switch_forward(table: FlowTable, frame: CanFrame, in_port: int,
                   ports: tuple[int, ...] | list[int]) -> ForwardResult:
    """Apply the table to one frame arriving on ``in_port``.

    ``ports`` lists the ECU-facing ports; the storage sink is ``STORAGE_PORT``.
    """
    if in_port == STORAGE_PORT:
        raise ContractError("frames cannot enter from the storage port")
    rule = table.lookup(frame, in_port)
    if rule is None:
        table.default_packets += 1
        table.default_bytes += frame.dlc
        action = table.default_action
    else:
        rule.hit(frame)
        action = rule.action
    if action is Action.BROADCAST:
        delivered = tuple(p for p in ports if p != in_port)
    elif action is Action.REDIRECT_STORAGE:
        delivered = (STORAGE_PORT,)
    else:
        delivered = ()
    return ForwardResult(action, delivered, rule)
