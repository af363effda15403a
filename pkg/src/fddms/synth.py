"""Synthetic attack-free CAN traffic for the built-in message set.

Signals follow smoothed random walks inside plausible driving ranges. The
torque family (TQI_ACOR, TQI, TQI_MIN, TQI_TARGET, TQI_MAX, TQFR) is driven
by the throttle so the correlation structure resembles a real capture.
Every message type is broadcast every ``period`` seconds.
"""

from __future__ import annotations

import numpy as np

from .can_codec import CanFrame, SignalCatalog, _motorola_shift, default_catalog


def _smooth_walk(rng: np.random.Generator, n: int, lo: float, hi: float, step: float, smooth: int = 50) -> np.ndarray:
    x = np.empty(n)
    x[0] = rng.uniform(lo + 0.3 * (hi - lo), lo + 0.6 * (hi - lo))
    steps = rng.normal(0.0, step, n)
    for k in range(1, n):
        v = x[k - 1] + steps[k]
        if v < lo or v > hi:
            v = x[k - 1] - steps[k]
        x[k] = min(max(v, lo), hi)
    if smooth > 1:
        kernel = np.ones(smooth) / smooth
        x = np.convolve(np.pad(x, (smooth - 1, 0), mode="edge"), kernel, mode="valid")
    return x


def synth_signals(duration: float, period: float = 0.01, seed: int = 0) -> dict[str, np.ndarray]:
    """Physical values per catalog label on a uniform ``period`` grid."""
    rng = np.random.default_rng(seed)
    n = int(round(duration / period))
    # driver inputs sampled at 10 Hz then held, which keeps the walk loop cheap
    sub = max(1, int(round(0.1 / period)))
    m = -(-n // sub)

    def up(x):
        return np.repeat(x, sub)[:n]

    throttle = _smooth_walk(rng, m, 0.0, 60.0, 2.5, smooth=8)
    brake = np.clip(_smooth_walk(rng, m, -1.0, 1.0, 0.15, smooth=8), 0, None)
    speed = np.clip(_smooth_walk(rng, m, 5.0, 120.0, 1.2, smooth=20) + 0.15 * throttle, 0, 160)
    steer = _smooth_walk(rng, m, 0.0, 600.0, 15.0, smooth=10)

    throttle, brake, speed, steer = up(throttle), up(brake), up(speed), up(steer)
    noise = lambda s: rng.normal(0.0, s, n)  # noqa: E731

    torque = np.clip(0.9 * throttle + 3.0 + noise(0.3), 0, 95)
    t = np.arange(n) * period
    sig = {
        "SAS_Angle": steer,
        "SAS_Speed": np.clip(np.abs(np.gradient(steer, period)) * 0.5 + noise(2.0), 0, 400),
        "MsgCount": np.arange(n) % 16,
        "CheckSum": rng.integers(0, 16, n),
        "TQ_COR_STAT": np.where(throttle > 40, 2, 1),
        "TQI_ACOR": torque,
        "N": np.clip(700 + 22 * speed + 12 * throttle + noise(15.0), 600, 6500),
        "TQI": np.clip(torque + noise(0.2), 0, 99),
        "TQFR": np.clip(0.6 * torque + 8 + noise(1.5), 0, 99),
        "VS": speed,
        "MUL_CODE": (np.arange(n) // 50) % 4,
        "TEMP_ENG": np.clip(20 + 70 * (1 - np.exp(-t / 300.0)) + noise(0.3), -48, 143),
        "BRAKE_ACT": np.where(brake > 0.2, 2, 1),
        "TPS": np.clip(throttle * 0.95 + noise(0.4), -15, 104),
        "PV_AV_CAN": np.clip(throttle * 1.1 + noise(1.5), 0, 99),
        "VB": np.clip(13.8 + 0.3 * np.sin(t / 17.0) + noise(0.05), 0, 25),
        "TQI_MIN": np.clip(0.4 * torque + 2 + noise(2.0), 0, 99),
        "TQI.EMS16": np.clip(torque + noise(0.25), 0, 99),
        "TQI_TARGET": np.clip(torque * 1.02 + noise(0.8), 0, 99),
        "TQI_MAX": np.clip(85 + noise(0.4) - 0.05 * torque, 0, 99),
    }
    return {k: np.asarray(v, dtype=np.float64) for k, v in sig.items()}


def synth_frames(duration: float, catalog: SignalCatalog | None = None, period: float = 0.01,
                 seed: int = 0, t0: float = 0.0) -> list[CanFrame]:
    """Encode synthetic signals into CAN frames, one per message type per period."""
    catalog = catalog or default_catalog()
    values = synth_signals(duration, period, seed)
    n = len(next(iter(values.values())))
    cids = catalog.cids
    words = {cid: np.zeros(n, dtype=np.uint64) for cid in cids}
    for label, spec in zip(catalog.labels, catalog.specs):
        raw = np.floor((values[label] - spec.offset) / spec.scale + 0.5)
        raw = np.clip(raw, 0, spec.raw_max).astype(np.uint64)
        if spec.byte_order == "intel":
            words[spec.cid] |= raw << np.uint64(spec.start_bit)
        else:
            shift = np.uint64(_motorola_shift(spec.start_bit, spec.bit_len))
            words[spec.cid] |= (raw << shift).byteswap()
    payload = {cid: words[cid].astype("<u8").tobytes() for cid in cids}
    frames = []
    for k in range(n):
        base = t0 + k * period
        for j, cid in enumerate(cids):
            data = payload[cid][8 * k: 8 * k + 8]
            frames.append(CanFrame(round(base + j * 1e-4, 6), cid, 8, data))
    return frames
