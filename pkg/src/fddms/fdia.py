"""False data injection: overwrite one second of the target signals with uniform values.

For each attacked cell the false value is ``v_normal + delta`` with
``delta ~ U(v_min - v_normal, v_max - v_normal)``, so the injected value is
uniform over the signal's valid range ``[v_min, v_max]``. ``v_min`` is 0 for
every built-in signal except those whose offset shifts the range below zero.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .can_codec import ContractError, SignalCatalog, SignalSpec, default_catalog
from .dataset import Instance, InstanceSet

DEFAULT_TARGETS = (
    "TQI_ACOR", "TQI", "TPS", "PV_AV_CAN", "TQI_MIN", "TQI_TARGET",
    "N", "TQFR", "VB", "TQI_MAX", "TQI.EMS16",
)


@dataclass
class AttackConfig:
    target_signals: tuple[str, ...]
    v_max: dict[str, float]
    v_min: dict[str, float]
    fraction_attacked: float = 0.5
    seed: int = 0
    specs: dict[str, SignalSpec] = field(default_factory=dict)

    def __post_init__(self):
        self.target_signals = tuple(self.target_signals)
        if not 0.0 <= self.fraction_attacked <= 1.0:
            raise ContractError("fraction_attacked must lie in [0, 1]")
        for s in self.target_signals:
            if s not in self.v_max or s not in self.v_min:
                raise ContractError(f"no range known for target signal {s}")
            if self.v_max[s] < 0 or self.v_max[s] < self.v_min[s]:
                raise ContractError(f"{s}: invalid range [{self.v_min[s]}, {self.v_max[s]}]")

    @classmethod
    def from_catalog(cls, catalog: SignalCatalog | None = None, targets: Sequence[str] = DEFAULT_TARGETS,
                     fraction_attacked: float = 0.5, seed: int = 0, quantize: bool = True) -> AttackConfig:
        catalog = catalog or default_catalog()
        for t in targets:
            if t not in catalog:
                raise ContractError(f"target signal {t} is not in the catalog")
        specs = {t: catalog[t] for t in targets}
        return cls(tuple(targets), {t: s.max_value for t, s in specs.items()},
                   {t: s.min_value for t, s in specs.items()},
                   fraction_attacked, seed, specs if quantize else {})


@dataclass
class InjectionRecord:
    index: int
    injected_second: int
    signals: tuple[str, ...]
    deltas: np.ndarray  # (steps_per_second, n_signals)


def sample_delta(v_normal: float, v_max: float, rng: np.random.Generator, v_min: float = 0.0) -> float:
    """One draw of delta; ``v_normal`` outside [v_min, v_max] is clamped first."""
    v = min(max(v_normal, v_min), v_max)
    return float(rng.uniform(v_min - v, v_max - v))


def sample_deltas(v_normal: np.ndarray, v_min: np.ndarray, v_max: np.ndarray,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised draws; returns (deltas, mask of clamped normal values)."""
    v = np.clip(v_normal, v_min, v_max)
    clamped = v != v_normal
    return rng.uniform(v_min - v, v_max - v), clamped


def _quantize(values: np.ndarray, spec: SignalSpec, lo: float, hi: float) -> np.ndarray:
    raw = np.clip(np.floor((values - spec.offset) / spec.scale + 0.5), 0, spec.raw_max)
    return np.clip(spec.offset + spec.scale * raw, lo, hi)


def inject_instance(inst: Instance, cfg: AttackConfig, rng: np.random.Generator,
                    features: Sequence[str], rate: int) -> tuple[Instance, InjectionRecord | None]:
    """Attack one instance at a uniformly chosen second of its window.

    Every cell of the chosen second is guaranteed to change: a quantized draw
    that lands on the normal value is redrawn.
    """
    if inst.label != 0:
        raise ContractError("instance is already attacked")
    features = list(features)
    cols = [features.index(s) for s in cfg.target_signals]
    seconds = inst.window.shape[0] // rate
    sec = int(rng.integers(0, seconds))
    rows = slice(sec * rate, (sec + 1) * rate)
    window = inst.window.copy()
    normal = window[rows][:, cols]
    lo = np.array([cfg.v_min[s] for s in cfg.target_signals])
    hi = np.array([cfg.v_max[s] for s in cfg.target_signals])
    attacked = np.empty_like(normal)
    todo = np.ones(normal.shape, bool)
    for _ in range(64):
        d, _ = sample_deltas(normal, lo, hi, rng)
        cand = np.clip(normal, lo, hi) + d
        if cfg.specs:
            for j, s in enumerate(cfg.target_signals):
                cand[:, j] = _quantize(cand[:, j], cfg.specs[s], lo[j], hi[j])
        attacked[todo] = cand[todo]
        todo &= attacked == normal
        if not todo.any():
            break
    window[rows, cols] = attacked
    out = Instance(inst.start_second, window, 1, sec)
    return out, InjectionRecord(-1, sec, cfg.target_signals, attacked - normal)


def build_attacked_dataset(instances: InstanceSet, cfg: AttackConfig,
                           rng: np.random.Generator | None = None) -> tuple[InstanceSet, list[InjectionRecord]]:
    """Attack ``round(fraction * n)`` instances chosen uniformly without replacement."""
    if np.any(instances.y != 0):
        raise ContractError("input instances must all be Normal")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    n = len(instances)
    k = int(math.floor(cfg.fraction_attacked * n + 0.5))
    chosen = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, np.int64)
    streams = rng.spawn(k)
    X = instances.X.copy()
    y = instances.y.copy()
    inj = instances.injected_second.copy()
    records = []
    for idx, sub in zip(chosen, streams):
        new, rec = inject_instance(instances[int(idx)], cfg, sub, instances.features, instances.rate)
        X[idx] = new.window
        y[idx] = 1
        inj[idx] = new.injected_second
        rec.index = int(idx)
        records.append(rec)
    return InstanceSet(X, y, instances.start_second.copy(), inj, instances.features, instances.rate), records


MANIFEST_HEADER = ["instance", "start_second", "injected_second", "signal", "step", "delta"]


def write_manifest(records: Sequence[InjectionRecord], instances: InstanceSet, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        for rec in records:
            start = int(instances.start_second[rec.index])
            for step in range(rec.deltas.shape[0]):
                for j, s in enumerate(rec.signals):
                    w.writerow([rec.index, start, rec.injected_second, s, step, repr(float(rec.deltas[step, j]))])


def read_manifest(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("instance", "start_second", "injected_second", "step"):
            r[k] = int(r[k])
        r["delta"] = float(r["delta"])
    return rows
