"""Glue between stages: trace -> signal table -> instances -> attacked, normalized splits."""

from __future__ import annotations

from dataclasses import dataclass

from .can_codec import CanFrame, SignalCatalog, decode_arrays, default_catalog, frames_to_arrays
from .dataset import DEFAULT_RATE, InstanceSet, SignalTable, SplitSet, build_instances, normalize, resample_series, split
from .fdia import AttackConfig, InjectionRecord, build_attacked_dataset
from .synth import synth_frames


def table_from_frames(frames: list[CanFrame], catalog: SignalCatalog | None = None,
                      rate: int = DEFAULT_RATE, duration: int | None = None) -> SignalTable:
    catalog = catalog or default_catalog()
    series = decode_arrays(frames_to_arrays(frames), catalog)
    return resample_series(series, catalog.labels, rate, duration)


@dataclass
class Prepared:
    table: SignalTable
    clean: InstanceSet
    attacked: InstanceSet
    records: list[InjectionRecord]
    split: SplitSet


def prepare(frames: list[CanFrame], catalog: SignalCatalog | None = None, rate: int = DEFAULT_RATE,
            seed: int = 0, fraction_attacked: float = 0.5) -> Prepared:
    """Decode, window, inject and split; the returned split is normalized on train statistics."""
    catalog = catalog or default_catalog()
    table = table_from_frames(frames, catalog, rate)
    clean = build_instances(table)
    cfg = AttackConfig.from_catalog(catalog, fraction_attacked=fraction_attacked, seed=seed)
    attacked, records = build_attacked_dataset(clean, cfg)
    return Prepared(table, clean, attacked, records, normalize(split(attacked, seed=seed)))


def synthetic_prepared(duration: int = 600, seed: int = 0, rate: int = DEFAULT_RATE) -> Prepared:
    return prepare(synth_frames(duration, seed=seed), rate=rate, seed=seed)
