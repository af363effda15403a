"""CAN trace parsing and DBC-lite signal decoding.

Bit numbering follows the Intel (little-endian) convention by default: the
eight data bytes are viewed as one little-endian 64-bit integer, byte 0 holds
bits 0-7 and bit 0 is the LSB of byte 0. Signals declared with
``byte_order="motorola"`` use DBC sawtooth numbering where ``start_bit`` names
the most significant bit of the field.
"""

from __future__ import annotations

import csv
import io
import math
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MAX_STANDARD_ID = 0x7FF
DATA_BYTES = 8


class ContractError(ValueError):
    """A caller broke a documented precondition."""


class TraceParseError(ValueError):
    def __init__(self, lineno: int, line: str, reason: str):
        super().__init__(f"line {lineno}: {reason}: {line!r}")
        self.lineno = lineno
        self.line = line
        self.reason = reason


@dataclass(frozen=True, slots=True)
class CanFrame:
    timestamp: float
    can_id: int
    dlc: int
    data: bytes

    def __post_init__(self):
        if not 0 <= self.can_id <= MAX_STANDARD_ID:
            raise ContractError(f"can_id {self.can_id:#x} is not an 11-bit identifier")
        if not 0 <= self.dlc <= DATA_BYTES:
            raise ContractError(f"dlc {self.dlc} outside 0..8")
        if len(self.data) != DATA_BYTES:
            raise ContractError(f"data must hold exactly 8 bytes, got {len(self.data)}")


@dataclass(frozen=True, slots=True)
class SignalSpec:
    name: str
    msg: str
    cid: int
    start_bit: int
    bit_len: int
    scale: float
    offset: float
    v_max: float | None = None
    v_min: float | None = None
    byte_order: str = "intel"

    def __post_init__(self):
        if self.start_bit < 0 or self.bit_len < 1 or self.start_bit + self.bit_len > 64:
            raise ContractError(f"{self.name}: bit range {self.start_bit}+{self.bit_len} exceeds 64 bits")
        if self.scale <= 0:
            raise ContractError(f"{self.name}: scale must be positive")
        if self.byte_order not in ("intel", "motorola"):
            raise ContractError(f"{self.name}: unknown byte order {self.byte_order!r}")

    @property
    def mid(self) -> int:
        return self.cid

    @property
    def raw_max(self) -> int:
        return (1 << self.bit_len) - 1

    @property
    def max_value(self) -> float:
        """Upper bound of the attack range (V_max)."""
        if self.v_max is not None:
            return self.v_max
        return self.offset + self.scale * self.raw_max

    @property
    def min_value(self) -> float:
        if self.v_min is not None:
            return self.v_min
        return self.offset

    def bit_mask(self) -> int:
        """Mask over the Intel-ordered 64-bit payload integer."""
        if self.byte_order == "intel":
            return self.raw_max << self.start_bit
        return self.raw_max << _motorola_shift(self.start_bit, self.bit_len)


@dataclass(frozen=True, slots=True)
class DecodedRecord:
    timestamp: float
    signal: str
    raw: int
    value: float


# No., name, msg, cid, bits, scale, offset
_TABLE = """\
1,SAS_Angle,SAS11,02b0,0-15,0.10,0.00
2,SAS_Speed,SAS11,02b0,16-23,4.00,0.00
3,MsgCount,SAS11,02b0,32-35,1.00,0.00
4,CheckSum,SAS11,02b0,36-39,1.00,0.00
5,TQ_COR_STAT,EMS11,0316,4-5,1.00,0.00
6,TQI_ACOR,EMS11,0316,8-15,0.39,0.00
7,N,EMS11,0316,16-31,0.25,0.00
8,TQI,EMS11,0316,32-39,0.39,0.00
9,TQFR,EMS11,0316,40-47,0.39,0.00
10,VS,EMS11,0316,48-55,1.00,0.00
11,MUL_CODE,EMS12,0329,6-7,1.00,0.00
12,TEMP_ENG,EMS12,0329,8-15,0.75,-48.00
13,BRAKE_ACT,EMS12,0329,32-33,1.00,0.00
14,TPS,EMS12,0329,40-47,0.47,-15.02
15,PV_AV_CAN,EMS12,0329,48-55,0.39,0.00
16,VB,EMS14,0545,24-31,0.10,0.00
17,TQI_MIN,EMS16,0260,0-7,0.39,0.00
18,TQI,EMS16,0260,8-15,0.39,0.00
19,TQI_TARGET,EMS16,0260,16-23,0.39,0.00
20,TQI_MAX,EMS16,0260,40-47,0.39,0.00
"""


def parse_bits(text: str) -> tuple[int, int]:
    """``"8-15"`` -> (start_bit=8, bit_len=8); the end of the range is inclusive."""
    lo, _, hi = text.partition("-")
    start = int(lo)
    end = int(hi) if hi else start
    if end < start:
        raise ContractError(f"bit range {text!r} is reversed")
    return start, end - start + 1


class SignalCatalog:
    """Ordered collection of signal specs keyed by (cid, name).

    Column labels are the signal name, suffixed with ``.MSG`` when the same
    name already appeared under an earlier message (the built-in catalog has TQI under
    both EMS11 and EMS16).
    """

    def __init__(self, specs: Sequence[SignalSpec]):
        self.specs: tuple[SignalSpec, ...] = tuple(specs)
        keys = [(s.cid, s.name) for s in self.specs]
        if len(set(keys)) != len(keys):
            raise ContractError("duplicate (cid, name) in catalog")
        labels: list[str] = []
        seen: set[str] = set()
        for s in self.specs:
            labels.append(s.name if s.name not in seen else f"{s.name}.{s.msg}")
            seen.add(s.name)
        self.labels: tuple[str, ...] = tuple(labels)
        self._by_label = dict(zip(self.labels, self.specs))
        self._by_cid: dict[int, list[tuple[str, SignalSpec]]] = {}
        for label, s in zip(self.labels, self.specs):
            self._by_cid.setdefault(s.cid, []).append((label, s))
        for cid, entries in self._by_cid.items():
            acc = 0
            for _, s in entries:
                if acc & s.bit_mask():
                    raise ContractError(f"overlapping bit ranges in message {cid:#06x}")
                acc |= s.bit_mask()

    def __len__(self) -> int:
        return len(self.specs)

    def __iter__(self) -> Iterator[SignalSpec]:
        return iter(self.specs)

    def __getitem__(self, label: str) -> SignalSpec:
        return self._by_label[label]

    def __contains__(self, label: object) -> bool:
        return label in self._by_label

    def get(self, cid: int, name: str) -> SignalSpec:
        for s in self.specs:
            if s.cid == cid and s.name == name:
                return s
        raise KeyError((cid, name))

    def for_cid(self, cid: int) -> list[tuple[str, SignalSpec]]:
        return list(self._by_cid.get(cid, ()))

    @property
    def cids(self) -> list[int]:
        return list(self._by_cid)

    def messages(self) -> dict[int, str]:
        return {s.cid: s.msg for s in self.specs}

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def v_max(self) -> dict[str, float]:
        return {label: s.max_value for label, s in zip(self.labels, self.specs)}


def default_catalog(byte_order: str = "intel") -> SignalCatalog:
    specs = []
    for row in csv.reader(io.StringIO(_TABLE)):
        _, name, msg, cid, bits, scale, offset = row
        start, length = parse_bits(bits)
        specs.append(SignalSpec(name, msg, int(cid, 16), start, length,
                                float(scale), float(offset), byte_order=byte_order))
    return SignalCatalog(specs)


CATALOG_COLUMNS = ["no", "signal", "msg", "cid", "mid", "bits", "scale", "offset", "v_max"]


def write_catalog(catalog: SignalCatalog, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CATALOG_COLUMNS + ["v_min", "byte_order"])
        for i, s in enumerate(catalog, 1):
            w.writerow([i, s.name, s.msg, f"{s.cid:04x}", s.mid,
                        f"{s.start_bit}-{s.start_bit + s.bit_len - 1}",
                        repr(s.scale), repr(s.offset), repr(s.max_value),
                        repr(s.min_value), s.byte_order])


def load_catalog(path: str | Path) -> SignalCatalog:
    """Read a catalog file: the built-in catalog columns plus v_max (v_min, byte_order optional)."""
    specs = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            row = {k.strip().lower(): (v or "").strip() for k, v in row.items() if k}
            missing = [c for c in CATALOG_COLUMNS if c not in row and c != "v_max"]
            if missing:
                raise ContractError(f"catalog {path}: missing columns {missing}")
            cid = int(row["cid"], 16)
            if row.get("mid") and int(row["mid"]) != cid:
                raise ContractError(f"catalog {path}: mid {row['mid']} does not match cid {row['cid']}")
            start, length = parse_bits(row["bits"])
            specs.append(SignalSpec(
                row["signal"], row["msg"], cid, start, length,
                float(row["scale"]), float(row["offset"]),
                v_max=float(row["v_max"]) if row.get("v_max") else None,
                v_min=float(row["v_min"]) if row.get("v_min") else None,
                byte_order=row.get("byte_order") or "intel",
            ))
    return SignalCatalog(specs)


# --- bit fields --------------------------------------------------------------

def _motorola_shift(start_bit: int, bit_len: int) -> int:
    # sawtooth MSB position -> shift in the big-endian 64-bit view
    pos = (start_bit // 8) * 8 + (7 - start_bit % 8)
    shift = 64 - pos - bit_len
    if shift < 0:
        raise ContractError(f"motorola field {start_bit}+{bit_len} runs past byte 7")
    return shift


def _check_range(start_bit: int, bit_len: int) -> None:
    if start_bit < 0 or bit_len < 1 or start_bit + bit_len > 64:
        raise ContractError(f"bit range [{start_bit}, {start_bit + bit_len}) outside [0, 64)")


def extract_raw_bits(data: bytes, start_bit: int, bit_len: int, byte_order: str = "intel") -> int:
    _check_range(start_bit, bit_len)
    if len(data) != DATA_BYTES:
        raise ContractError("data must be 8 bytes")
    mask = (1 << bit_len) - 1
    if byte_order == "intel":
        return (int.from_bytes(data, "little") >> start_bit) & mask
    return (int.from_bytes(data, "big") >> _motorola_shift(start_bit, bit_len)) & mask


def insert_raw_bits(data: bytes, start_bit: int, bit_len: int, raw: int, byte_order: str = "intel") -> bytes:
    _check_range(start_bit, bit_len)
    mask = (1 << bit_len) - 1
    if not 0 <= raw <= mask:
        raise ContractError(f"raw value {raw} does not fit in {bit_len} bits")
    if byte_order == "intel":
        word = int.from_bytes(data, "little")
        word = (word & ~(mask << start_bit)) | (raw << start_bit)
        return word.to_bytes(DATA_BYTES, "little")
    shift = _motorola_shift(start_bit, bit_len)
    word = int.from_bytes(data, "big")
    word = (word & ~(mask << shift)) | (raw << shift)
    return word.to_bytes(DATA_BYTES, "big")


def raw_to_physical(raw: int, spec: SignalSpec) -> float:
    return spec.offset + spec.scale * raw


@dataclass(frozen=True, slots=True)
class Quantized:
    raw: int
    clamped: bool


def physical_to_raw(value: float, spec: SignalSpec) -> Quantized:
    """Nearest raw integer for ``value``; out-of-range values are clamped and flagged."""
    x = (value - spec.offset) / spec.scale
    raw = math.floor(x + 0.5)
    clamped = raw < 0 or raw > spec.raw_max
    return Quantized(min(max(raw, 0), spec.raw_max), clamped)


def quantize(value: float, spec: SignalSpec) -> float:
    return raw_to_physical(physical_to_raw(value, spec).raw, spec)


def decode_frame(frame: CanFrame, catalog: SignalCatalog) -> list[DecodedRecord]:
    out = []
    for label, spec in catalog.for_cid(frame.can_id):
        raw = extract_raw_bits(frame.data, spec.start_bit, spec.bit_len, spec.byte_order)
        out.append(DecodedRecord(frame.timestamp, label, raw, raw_to_physical(raw, spec)))
    return out


def encode_signal(frame: CanFrame, spec: SignalSpec, value: float) -> CanFrame:
    if spec.cid != frame.can_id:
        raise ContractError(f"signal {spec.name} belongs to {spec.cid:#06x}, frame is {frame.can_id:#06x}")
    q = physical_to_raw(value, spec)
    data = insert_raw_bits(frame.data, spec.start_bit, spec.bit_len, q.raw, spec.byte_order)
    return replace(frame, data=data)


# --- vectorised decoding -----------------------------------------------------

@dataclass
class FrameArrays:
    timestamp: np.ndarray  # float64
    can_id: np.ndarray  # int64
    payload: np.ndarray  # uint64, Intel view of the data bytes

    def __len__(self) -> int:
        return len(self.timestamp)


def frames_to_arrays(frames: Sequence[CanFrame]) -> FrameArrays:
    n = len(frames)
    ts = np.fromiter((f.timestamp for f in frames), dtype=np.float64, count=n)
    ids = np.fromiter((f.can_id for f in frames), dtype=np.int64, count=n)
    raw = np.frombuffer(b"".join(f.data for f in frames), dtype="<u8") if n else np.zeros(0, "<u8")
    return FrameArrays(ts, ids, raw.astype(np.uint64))


def decode_arrays(arrays: FrameArrays, catalog: SignalCatalog) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per signal label, (timestamps, physical values) over all matching frames."""
    out = {}
    for cid in catalog.cids:
        sel = arrays.can_id == cid
        ts = arrays.timestamp[sel]
        payload = arrays.payload[sel]
        for label, spec in catalog.for_cid(cid):
            if spec.byte_order == "intel":
                raw = (payload >> np.uint64(spec.start_bit)) & np.uint64(spec.raw_max)
            else:
                big = payload.byteswap()
                raw = (big >> np.uint64(_motorola_shift(spec.start_bit, spec.bit_len))) & np.uint64(spec.raw_max)
            out[label] = (ts, spec.offset + spec.scale * raw.astype(np.float64))
    return out


# --- trace text --------------------------------------------------------------

@dataclass(frozen=True)
class TraceLayout:
    """Whitespace-token positions of each field in a trace line."""

    timestamp: int = 0
    can_id: int = 1
    dlc: int = 2
    data: int = 3
    skip_prefix: tuple[str, ...] = field(default=())


PLAIN_LAYOUT = TraceLayout()
# "Timestamp: 0.000000  ID: 0316  000  DLC: 8  05 21 68 09 21 21 00 6f"
OTIDS_LAYOUT = TraceLayout(timestamp=1, can_id=3, dlc=6, data=7)
LAYOUTS = {"plain": PLAIN_LAYOUT, "otids": OTIDS_LAYOUT}


def parse_line(line: str, layout: TraceLayout = PLAIN_LAYOUT) -> CanFrame:
    tok = line.split()
    try:
        ts = float(tok[layout.timestamp])
        can_id = int(tok[layout.can_id], 16)
        dlc = int(tok[layout.dlc])
    except (IndexError, ValueError) as exc:
        raise ValueError(f"bad header fields ({exc})") from None
    if not 0 <= dlc <= DATA_BYTES:
        raise ValueError(f"dlc {dlc} outside 0..8")
    payload = tok[layout.data: layout.data + dlc]
    if len(payload) != dlc:
        raise ValueError(f"expected {dlc} data bytes, found {len(payload)}")
    if len(tok) > layout.data + dlc:
        raise ValueError("trailing tokens after data bytes")
    try:
        data = bytes(int(b, 16) for b in payload)
    except ValueError:
        raise ValueError("data byte is not hex in 00..ff") from None
    if not math.isfinite(ts):
        raise ValueError("timestamp is not finite")
    if can_id > MAX_STANDARD_ID:
        raise ValueError(f"id {can_id:#x} is not 11-bit")
    return CanFrame(ts, can_id, dlc, data.ljust(DATA_BYTES, b"\0"))


def parse_trace(lines: Iterable[str], layout: TraceLayout = PLAIN_LAYOUT, strict: bool = True,
                errors: list[TraceParseError] | None = None) -> list[CanFrame]:
    """Parse trace lines into frames in file order.

    In strict mode the first malformed line raises TraceParseError. Otherwise
    bad lines are skipped and, if ``errors`` is given, appended to it.
    """
    frames = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            frames.append(parse_line(line, layout))
        except ValueError as exc:
            err = TraceParseError(lineno, line.rstrip("\n"), str(exc))
            if strict:
                raise err from None
            if errors is not None:
                errors.append(err)
    return frames


def format_frame(frame: CanFrame) -> str:
    data = " ".join(f"{b:02x}" for b in frame.data[: frame.dlc])
    head = f"{frame.timestamp:.6f} {frame.can_id:04x} {frame.dlc}"
    return f"{head} {data}" if data else head


def serialize_trace(frames: Iterable[CanFrame]) -> str:
    return "".join(format_frame(f) + "\n" for f in frames)


def read_trace(path: str | Path, layout: TraceLayout = PLAIN_LAYOUT, strict: bool = True,
               errors: list[TraceParseError] | None = None) -> list[CanFrame]:
    with open(path) as fh:
        return parse_trace(fh, layout, strict, errors)


RECORD_HEADER = ["timestamp", "signal", "raw", "value"]


def write_records(records: Iterable[DecodedRecord], fh) -> int:
    w = csv.writer(fh)
    w.writerow(RECORD_HEADER)
    n = 0
    for r in records:
        w.writerow([f"{r.timestamp:.6f}", r.signal, r.raw, repr(r.value)])
        n += 1
    return n


def read_records(fh) -> list[DecodedRecord]:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None:
        return []
    if header != RECORD_HEADER:
        raise ContractError(f"unexpected records header {header}")
    return [DecodedRecord(float(t), s, int(raw), float(v)) for t, s, raw, v in reader]
