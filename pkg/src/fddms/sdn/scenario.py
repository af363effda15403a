"""Scenario configuration, node topology and traffic schedules."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from ..can_codec import LAYOUTS, CanFrame, ContractError, SignalCatalog, encode_signal, read_trace
from ..dataset import WINDOW_SECONDS
from ..fdia import DEFAULT_TARGETS, AttackConfig
from ..synth import synth_frames

NODE_PORTS = {"EMS": 1, "MDPS": 2, "ABS": 3, "ESC": 4, "EPB": 5, "COMPROMISED": 6}
ROLES = {"EMS": "broadcaster", "MDPS": "broadcaster", "ABS": "receiver", "ESC": "receiver",
         "EPB": "receiver", "COMPROMISED": "compromised"}
MESSAGE_OWNER = {"EMS11": "EMS", "EMS12": "EMS", "EMS14": "EMS", "EMS16": "EMS", "SAS11": "MDPS"}
PORT_NODES = {p: n for n, p in NODE_PORTS.items()}


class ScenarioError(ContractError):
    pass


def parse_seconds(text: str) -> tuple[int, ...]:
    """``"30-32,45"`` -> (30, 31, 32, 45)."""
    out: set[int] = set()
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, _, hi = part.partition("-")
        try:
            a, b = int(lo), int(hi or lo)
        except ValueError:
            raise ScenarioError(f"bad second range {part!r}") from None
        if a < 0 or b < a:
            raise ScenarioError(f"bad second range {part!r}")
        out.update(range(a, b + 1))
    return tuple(sorted(out))


@dataclass
class Scenario:
    nodes: tuple[str, ...] = tuple(NODE_PORTS)
    cadence_ms: float = 10.0
    duration: int = 60
    trace: str | None = None
    trace_layout: str = "plain"
    injection_manifest: str | None = None
    attack_seconds: tuple[int, ...] = ()
    transport: str = "virtual"
    model: str | None = None
    seed: int = 0
    prefill: bool = True
    link_delay_ms: float = 0.0
    time_scale: float = 1.0
    threshold: float = 0.5

    def __post_init__(self):
        self.nodes = tuple(self.nodes)
        unknown = [n for n in self.nodes if n not in NODE_PORTS]
        if unknown:
            raise ScenarioError(f"unknown nodes {unknown}; known: {sorted(NODE_PORTS)}")
        if self.transport not in ("virtual", "socket"):
            raise ScenarioError(f"transport must be virtual or socket, not {self.transport!r}")
        if self.trace_layout not in LAYOUTS:
            raise ScenarioError(f"unknown trace layout {self.trace_layout!r}")
        if self.cadence_ms <= 0 or self.duration < 0 or self.time_scale <= 0:
            raise ScenarioError("cadence, duration and time_scale must be positive")
        if self.attack_seconds and "COMPROMISED" not in self.nodes:
            raise ScenarioError("attack seconds require the COMPROMISED node")

    @property
    def ports(self) -> dict[str, int]:
        return {n: NODE_PORTS[n] for n in self.nodes}

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, raw: str, default):
    if name == "nodes":
        return tuple(x.strip().upper() for x in raw.split(",") if x.strip())
    if name == "attack_seconds":
        return parse_seconds(raw)
    if name in ("trace", "injection_manifest", "model"):
        return raw or None
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ScenarioError(f"{name}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    try:
        return type(default)(raw)
    except ValueError:
        raise ScenarioError(f"{name}: cannot parse {raw!r}") from None


def parse_scenario(text: str, overrides: dict[str, str] | None = None) -> Scenario:
    """Flat ``key=value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    defaults = Scenario()
    known = {f.name for f in fields(Scenario)}
    values: dict = {}
    items: list[tuple[str, str]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ScenarioError(f"line {lineno}: expected key=value")
        items.append((key.strip(), val.strip()))
    items += list((overrides or {}).items())
    for key, val in items:
        if key not in known:
            raise ScenarioError(f"unknown scenario key {key!r}")
        values[key] = _coerce(key, val, getattr(defaults, key))
    return Scenario(**values)


def load_scenario(path: str | Path, overrides: dict[str, str] | None = None) -> Scenario:
    return parse_scenario(Path(path).read_text(), overrides)


def manifest_seconds(path: str | Path) -> tuple[int, ...]:
    """Absolute injected seconds from an injection manifest, read as run time."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return tuple(sorted({int(r["start_second"]) + int(r["injected_second"]) for r in rows}))


@dataclass(order=True)
class Emission:
    time: float
    port: int
    frame: CanFrame = field(compare=False)
    spoofed: bool = field(default=False, compare=False)


@dataclass
class Traffic:
    history: list[CanFrame]
    emissions: list[Emission]
    attack_seconds: tuple[int, ...]


def ownership(catalog: SignalCatalog) -> dict[int, frozenset[int]]:
    """Switch port -> CAN ids that port's ECU legitimately sends."""
    owned: dict[int, set[int]] = {}
    for cid, msg in catalog.messages().items():
        node = MESSAGE_OWNER.get(msg)
        if node is not None:
            owned.setdefault(NODE_PORTS[node], set()).add(cid)
    return {p: frozenset(c) for p, c in owned.items()}


def _spoof(frame: CanFrame, specs, cfg: AttackConfig, rng: np.random.Generator, t: float) -> CanFrame:
    out = frame
    for label, spec in specs:
        out = encode_signal(out, spec, float(rng.uniform(cfg.v_min[label], cfg.v_max[label])))
    return CanFrame(round(t, 6), out.can_id, out.dlc, out.data)


def build_traffic(scn: Scenario, catalog: SignalCatalog, window: int = WINDOW_SECONDS) -> Traffic:
    """Legitimate frames per owning node plus the compromised node's spoofed copies.

    Run time starts at 0. With ``prefill`` the ``window`` seconds before 0 are
    returned as controller history.
    """
    period = scn.cadence_ms / 1000.0
    lead = window if scn.prefill else 0
    if scn.trace:
        frames = read_trace(scn.trace, LAYOUTS[scn.trace_layout])
        if frames:
            t0 = frames[0].timestamp + lead
            frames = [CanFrame(round(f.timestamp - t0, 6), f.can_id, f.dlc, f.data) for f in frames]
            frames = [f for f in frames if f.timestamp < scn.duration]
    else:
        frames = synth_frames(scn.duration + lead, catalog, period, scn.seed, t0=-float(lead))
    history = [f for f in frames if f.timestamp < 0]
    owners = {cid: MESSAGE_OWNER.get(msg) for cid, msg in catalog.messages().items()}
    emissions = [Emission(f.timestamp, NODE_PORTS[owners[f.can_id]], f)
                 for f in frames if f.timestamp >= 0 and owners.get(f.can_id) in scn.nodes]

    seconds = set(scn.attack_seconds)
    if scn.injection_manifest:
        seconds.update(manifest_seconds(scn.injection_manifest))
    seconds = tuple(sorted(s for s in seconds if s < scn.duration))
    if seconds:
        if "COMPROMISED" not in scn.nodes:
            raise ScenarioError("injection requires the COMPROMISED node")
        cfg = AttackConfig.from_catalog(catalog, [t for t in DEFAULT_TARGETS if t in catalog], seed=scn.seed)
        by_cid: dict[int, list] = {}
        for label in cfg.target_signals:
            by_cid.setdefault(catalog[label].cid, []).append((label, catalog[label]))
        rng = np.random.default_rng(scn.seed)
        port = NODE_PORTS["COMPROMISED"]
        wanted = set(seconds)
        spoofed = []
        for f in frames:
            if f.timestamp >= 0 and math.floor(f.timestamp) in wanted and f.can_id in by_cid:
                t = f.timestamp + period / 2
                spoofed.append(Emission(t, port, _spoof(f, by_cid[f.can_id], cfg, rng, t), True))
        emissions += spoofed
    emissions.sort()
    return Traffic(history, emissions, seconds)
