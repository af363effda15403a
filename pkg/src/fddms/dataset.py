"""Fixed-length instances from decoded signal streams, correlation analysis and splits."""

from __future__ import annotations

import csv
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .can_codec import ContractError, DecodedRecord
from .container import read_container, write_container

WINDOW_SECONDS = 10
DEFAULT_RATE = 10
CORRELATION_THRESHOLD = 0.75
INSTANCE_MAGIC = b"FDDMSINS"


@dataclass
class SignalTable:
    rate: int
    columns: tuple[str, ...]
    values: np.ndarray  # (duration * rate, n_columns)
    t0: float = 0.0

    @property
    def duration(self) -> float:
        return len(self.values) / self.rate

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]


def records_to_series(records: Iterable[DecodedRecord]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    ts: dict[str, list[float]] = {}
    vs: dict[str, list[float]] = {}
    for r in records:
        ts.setdefault(r.signal, []).append(r.timestamp)
        vs.setdefault(r.signal, []).append(r.value)
    return {k: (np.asarray(ts[k]), np.asarray(vs[k])) for k in ts}


def resample_series(series: Mapping[str, tuple[np.ndarray, np.ndarray]], columns: Sequence[str],
                    rate: int = DEFAULT_RATE, duration: int | None = None,
                    t0: float | None = None) -> SignalTable:
    """Sample-and-hold every column on a ``rate`` Hz grid starting at ``t0``.

    A column with no update at or before a tick reads 0 at that tick.
    ``duration`` defaults to the ceiling of the covered time span in seconds.
    """
    columns = tuple(columns)
    present = [series[c][0] for c in columns if c in series and len(series[c][0])]
    if not present:
        return SignalTable(rate, columns, np.zeros((0, len(columns))), 0.0 if t0 is None else t0)
    if t0 is None:
        t0 = min(float(t[0]) for t in present)
    if duration is None:
        t_last = max(float(t[-1]) for t in present)
        duration = int(math.ceil(t_last - t0 - 1e-9))
    ticks = t0 + np.arange(int(duration * rate)) / rate
    values = np.zeros((len(ticks), len(columns)))
    for j, name in enumerate(columns):
        if name not in series:
            continue
        ts, vs = series[name]
        if len(ts) == 0:
            continue
        if np.any(np.diff(ts) < 0):
            raise ContractError(f"records for {name} are not sorted by timestamp")
        idx = np.searchsorted(ts, ticks + 1e-9, side="right") - 1
        col = np.where(idx >= 0, vs[np.clip(idx, 0, None)], 0.0)
        values[:, j] = col
    return SignalTable(rate, columns, values, float(t0))


def resample(records: Iterable[DecodedRecord], columns: Sequence[str], rate: int = DEFAULT_RATE,
             duration: int | None = None, t0: float | None = None) -> SignalTable:
    return resample_series(records_to_series(records), columns, rate, duration, t0)


@dataclass
class Instance:
    start_second: int
    window: np.ndarray
    label: int
    injected_second: int | None = None


@dataclass
class InstanceSet:
    """Column-oriented store of equally shaped instances."""

    X: np.ndarray  # (n, W, F)
    y: np.ndarray  # (n,) int64
    start_second: np.ndarray  # (n,) int64
    injected_second: np.ndarray  # (n,) int64, -1 where not attacked
    features: tuple[str, ...]
    rate: int = DEFAULT_RATE

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.start_second = np.asarray(self.start_second, dtype=np.int64)
        self.injected_second = np.asarray(self.injected_second, dtype=np.int64)
        self.features = tuple(self.features)
        n = len(self.X)
        if not (len(self.y) == len(self.start_second) == len(self.injected_second) == n):
            raise ContractError("instance arrays disagree in length")
        if np.any((self.y == 1) != (self.injected_second >= 0)):
            raise ContractError("label must be 1 exactly when an injected second is recorded")

    def __len__(self) -> int:
        return len(self.X)

    def __getitem__(self, i: int) -> Instance:
        inj = int(self.injected_second[i])
        return Instance(int(self.start_second[i]), self.X[i], int(self.y[i]), inj if inj >= 0 else None)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def window_steps(self) -> int:
        return self.X.shape[1] if self.X.ndim == 3 else WINDOW_SECONDS * self.rate

    def subset(self, idx) -> InstanceSet:
        idx = np.asarray(idx, dtype=np.int64)
        return InstanceSet(self.X[idx], self.y[idx], self.start_second[idx],
                           self.injected_second[idx], self.features, self.rate)

    def with_X(self, X: np.ndarray) -> InstanceSet:
        return replace(self, X=X)

    @classmethod
    def from_instances(cls, instances: Sequence[Instance], features: Sequence[str], rate: int = DEFAULT_RATE) -> InstanceSet:
        if not instances:
            return cls(np.zeros((0, WINDOW_SECONDS * rate, len(features))), [], [], [], features, rate)
        return cls(np.stack([i.window for i in instances]),
                   [i.label for i in instances], [i.start_second for i in instances],
                   [-1 if i.injected_second is None else i.injected_second for i in instances],
                   features, rate)

    @staticmethod
    def concat(sets: Sequence[InstanceSet]) -> InstanceSet:
        first = sets[0]
        return InstanceSet(np.concatenate([s.X for s in sets]), np.concatenate([s.y for s in sets]),
                           np.concatenate([s.start_second for s in sets]),
                           np.concatenate([s.injected_second for s in sets]), first.features, first.rate)


def build_instances(table: SignalTable, window: int = WINDOW_SECONDS, stride: int = 1) -> InstanceSet:
    """Sliding windows of ``window`` seconds at ``stride`` seconds, all labeled Normal.

    The count is ``floor(duration) - window``: a 1,904 s capture gives 1,894
    instances.
    """
    steps = window * table.rate
    count = max(0, (int(math.floor(table.duration + 1e-9)) - window) // stride) if stride else 0
    starts = np.arange(count, dtype=np.int64) * stride
    if count:
        X = np.stack([table.values[s * table.rate: s * table.rate + steps] for s in starts])
    else:
        X = np.zeros((0, steps, len(table.columns)))
    return InstanceSet(X, np.zeros(count, np.int64), starts, np.full(count, -1, np.int64),
                       table.columns, table.rate)


# --- correlation -------------------------------------------------------------

def pearson(x, y, return_flag: bool = False):
    """Pearson r of two equal-length vectors; a constant input gives 0 (flagged)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(x) != len(y):
        raise ContractError(f"length mismatch {len(x)} != {len(y)}")
    if len(x) < 2:
        raise ContractError("pearson needs at least two samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    degenerate = sxx == 0.0 or syy == 0.0
    r = 0.0
    if not degenerate:
        # one square root of the product keeps exact linear relations at exactly +-1,
        # unless the product under- or overflows
        den = math.sqrt(sxx * syy)
        if not 0.0 < den < math.inf:
            den = math.sqrt(sxx) * math.sqrt(syy)
        r = float(np.clip((dx @ dy) / den, -1.0, 1.0))
    return (r, degenerate) if return_flag else r


@dataclass
class CorrelationMatrix:
    labels: tuple[str, ...]
    r: np.ndarray
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))
    threshold: float = CORRELATION_THRESHOLD

    def __getitem__(self, pair: tuple[str, str]) -> float:
        a, b = pair
        return float(self.r[self.labels.index(a), self.labels.index(b)])


def correlation_matrix(table: SignalTable, threshold: float = CORRELATION_THRESHOLD) -> CorrelationMatrix:
    v = table.values
    k = v.shape[1]
    dev = v - v.mean(axis=0)
    norm = np.sqrt((dev ** 2).sum(axis=0))
    degenerate = norm == 0.0
    safe = np.where(degenerate, 1.0, norm)
    r = (dev.T @ dev) / np.outer(safe, safe)
    r[degenerate, :] = 0.0
    r[:, degenerate] = 0.0
    r = np.clip((r + r.T) / 2, -1.0, 1.0)
    idx = np.arange(k)
    r[idx, idx] = np.where(degenerate, 0.0, 1.0)
    return CorrelationMatrix(tuple(table.columns), r, degenerate, threshold)


def correlated_groups(m: CorrelationMatrix) -> dict[str, list[str]]:
    out = {}
    for i, a in enumerate(m.labels):
        partners = [(abs(m.r[i, j]), b) for j, b in enumerate(m.labels) if j != i and abs(m.r[i, j]) >= m.threshold]
        partners.sort(key=lambda p: -p[0])
        out[a] = [b for _, b in partners]
    return out


def write_correlation(m: CorrelationMatrix, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["signal", *m.labels])
        for label, row in zip(m.labels, m.r):
            w.writerow([label, *(f"{v:.6f}" for v in row)])


# --- splits and scaling ------------------------------------------------------

@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> Normalizer:
        flat = X.reshape(-1, X.shape[-1])
        return cls(flat.mean(axis=0), flat.std(axis=0))

    @property
    def scaled(self) -> np.ndarray:
        return self.std > 0

    def transform(self, X: np.ndarray) -> np.ndarray:
        # constant features pass through untouched
        mean = np.where(self.scaled, self.mean, 0.0)
        std = np.where(self.scaled, self.std, 1.0)
        return (X - mean) / std

    def inverse(self, X: np.ndarray) -> np.ndarray:
        mean = np.where(self.scaled, self.mean, 0.0)
        std = np.where(self.scaled, self.std, 1.0)
        return X * std + mean

    def unit_scale(self) -> np.ndarray:
        """Physical units per normalized unit, per feature."""
        return np.where(self.scaled, self.std, 1.0)


@dataclass
class SplitSet:
    train: InstanceSet
    validation: InstanceSet
    test: InstanceSet
    seed: int
    indices: dict[str, np.ndarray]
    normalizer: Normalizer | None = None


def split(instances: InstanceSet, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> SplitSet:
    """Shuffle then cut; validation and test sizes are floored, train takes the remainder."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ContractError(f"ratios {tuple(ratios)} must be three non-negative values summing to 1")
    n = len(instances)
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    n_test = int(math.floor(n * ratios[2] + 1e-9))
    n_train = n - n_val - n_test
    idx = {"train": np.sort(perm[:n_train]), "validation": np.sort(perm[n_train:n_train + n_val]),
           "test": np.sort(perm[n_train + n_val:])}
    return SplitSet(instances.subset(idx["train"]), instances.subset(idx["validation"]),
                    instances.subset(idx["test"]), seed, idx)


def normalize(s: SplitSet) -> SplitSet:
    if s.normalizer is not None:
        raise ContractError("split is already normalized")
    norm = Normalizer.fit(s.train.X)
    return SplitSet(s.train.with_X(norm.transform(s.train.X)),
                    s.validation.with_X(norm.transform(s.validation.X)),
                    s.test.with_X(norm.transform(s.test.X)), s.seed, s.indices, norm)


# --- persistence -------------------------------------------------------------

def save_instances(inst: InstanceSet, path: str | Path, extra: dict | None = None) -> None:
    meta = {"rate": inst.rate, "window_steps": int(inst.X.shape[1]) if inst.X.ndim == 3 else 0,
            "features": list(inst.features)}
    if extra:
        meta.update(extra)
    write_container(path, INSTANCE_MAGIC, meta, {
        "X": inst.X.astype(np.float64), "y": inst.y, "start_second": inst.start_second,
        "injected_second": inst.injected_second,
    })


def load_instances(path: str | Path) -> tuple[InstanceSet, dict]:
    meta, arr = read_container(path, INSTANCE_MAGIC)
    inst = InstanceSet(arr["X"], arr["y"], arr["start_second"], arr["injected_second"],
                       meta["features"], meta["rate"])
    return inst, meta


def export_instances_csv(inst: InstanceSet, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance", "step", "label", "start_second", "injected_second", *inst.features])
        for i in range(len(inst)):
            for t in range(inst.X.shape[1]):
                w.writerow([i, t, int(inst.y[i]), int(inst.start_second[i]), int(inst.injected_second[i]),
                            *(repr(float(v)) for v in inst.X[i, t])])
