"""Controller logic: buffer mirrored frames, classify the rolling window each second, mitigate."""

from __future__ import annotations

import logging
import time
from collections import deque
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from ..can_codec import CanFrame, FrameArrays, SignalCatalog, decode_arrays, default_catalog, frames_to_arrays
from ..dataset import DEFAULT_RATE, WINDOW_SECONDS, resample_series
from ..nn.lstm import LstmDetector
from .flows import Action, Match
from .wire import Alert, FlowMod

log = logging.getLogger(__name__)

MITIGATION_PRIORITY = 100

# a window of raw signal values -> probability of Attack
Detector = Callable[[np.ndarray], float]


def model_detector(model: LstmDetector) -> Detector:
    """Wrap a trained model so it accepts un-normalized windows."""

    def detect(window: np.ndarray) -> float:
        x = model.normalizer.transform(window) if model.normalizer is not None else window
        return float(model.predict_proba(x))

    return detect


@dataclass
class Verdict:
    time: float
    window_id: int
    probability: float
    attack: bool
    detection_seconds: float
    suspects: tuple[int, ...] = ()


@dataclass
class Controller:
    """Rolling-window detector with port-based mitigation.

    ``ownership`` maps each ECU port to the CAN ids it legitimately sends.
    A port seen sending an id it does not own is a suspect, and an Attack
    verdict redirects every suspect port to storage.
    """

    detector: Detector
    ownership: dict[int, frozenset[int]]
    catalog: SignalCatalog = field(default_factory=default_catalog)
    window: int = WINDOW_SECONDS
    rate: int = DEFAULT_RATE
    threshold: float = 0.5
    start: float = 0.0
    verdicts: list[Verdict] = field(default_factory=list)
    mitigated: dict[int, int] = field(default_factory=dict)  # port -> window id of the verdict
    undecodable: int = 0
    clock: Callable[[], float] = time.perf_counter

    def __post_init__(self):
        # frames arrive one by one but are decoded in per-tick columnar chunks
        self._pending: list[CanFrame] = []
        self._chunks: deque[FrameArrays] = deque()
        self._known = set(self.catalog.cids)
        self._suspects: dict[int, float] = {}
        self._next_tick = self.start + 1.0

    def prefill(self, frames) -> None:
        """Load history so the first tick already sees a full window."""
        for f in frames:
            if f.can_id in self._known:
                self._pending.append(f)

    def ingest(self, in_port: int, frame: CanFrame) -> list[tuple[Verdict, list]]:
        """Buffer one mirrored frame; returns (verdict, commands) for every tick it closes."""
        out = self.advance(frame.timestamp)
        if frame.can_id not in self._known:
            self.undecodable += 1
            return out
        if frame.can_id not in self.ownership.get(in_port, frozenset()):
            self._suspects[in_port] = frame.timestamp
        self._pending.append(frame)
        return out

    def advance(self, now: float) -> list[tuple[Verdict, list]]:
        """Run every tick at or before ``now``; frames stamped exactly on a tick belong to the next window."""
        out = []
        while self._next_tick <= now + 1e-9:
            out.append(self.tick(self._next_tick))
            self._next_tick += 1.0
        return out

    def window_values(self, now: float) -> np.ndarray | None:
        lo = now - self.window
        if self._pending:
            self._chunks.append(frames_to_arrays(self._pending))
            self._pending = []
        # keep one extra second so sample-and-hold has a value at the first tick
        while self._chunks and (len(self._chunks[0]) == 0 or self._chunks[0].timestamp.max() < lo - 1.0):
            self._chunks.popleft()
        if not self._chunks:
            return None
        ts = np.concatenate([c.timestamp for c in self._chunks])
        keep = (ts >= lo - 1.0) & (ts < now)
        if not keep.any() or ts[keep].min() > lo + 1e-9:
            return None
        order = np.flatnonzero(keep)[np.argsort(ts[keep], kind="stable")]
        arrays = FrameArrays(ts[order], np.concatenate([c.can_id for c in self._chunks])[order],
                             np.concatenate([c.payload for c in self._chunks])[order])
        series = decode_arrays(arrays, self.catalog)
        table = resample_series(series, self.catalog.labels, self.rate, self.window, lo)
        return table.values

    def tick(self, now: float) -> tuple[Verdict, list]:
        started = self.clock()
        values = self.window_values(now)
        window_id = int(round(now))
        if values is None:
            v = Verdict(now, window_id, float("nan"), False, self.clock() - started)
            return v, []
        p = self.detector(values)
        attack = p >= self.threshold
        suspects = tuple(sorted(port for port, t in self._suspects.items() if t >= now - self.window))
        v = Verdict(now, window_id, p, attack, self.clock() - started, suspects)
        self.verdicts.append(v)
        commands: list = []
        if attack:
            fresh = [port for port in suspects if port not in self.mitigated]
            for port in fresh:
                self.mitigated[port] = window_id
                commands.append(FlowMod(MITIGATION_PRIORITY, Match(in_port=port), Action.REDIRECT_STORAGE))
            if fresh or not suspects:
                where = ",".join(str(p) for p in fresh) or "unknown"
                commands.append(Alert(f"attack detected window={window_id} p={p:.4f} ports={where}"))
            log.info("t=%.1f attack p=%.4f suspects=%s", now, p, suspects)
        return v, commands
