from __future__ import annotations

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fddms.can_codec import (CanFrame, ContractError, SignalCatalog, TraceParseError, decode_arrays, decode_frame,
                             default_catalog, encode_signal, extract_raw_bits, format_frame, frames_to_arrays,
                             insert_raw_bits, load_catalog, parse_line, parse_trace, physical_to_raw,
                             raw_to_physical, read_records, serialize_trace, write_catalog, write_records)
from fddms.synth import synth_frames


def bit_oracle(data: bytes, start: int, length: int) -> int:
    """Bit-by-bit reading: bit k lives in byte k // 8 at position k % 8."""
    return sum(((data[(start + j) // 8] >> ((start + j) % 8)) & 1) << j for j in range(length))


def motorola_oracle(data: bytes, start: int, length: int) -> int:
    """Walk DBC sawtooth numbering from the MSB down."""
    value = 0
    pos = start
    for _ in range(length):
        value = (value << 1) | ((data[pos // 8] >> (pos % 8)) & 1)
        pos = pos - 1 if pos % 8 else pos + 15
    return value


def test_catalog_shape(catalog):
    assert len(catalog) == 20
    assert sorted(catalog.messages().values()) == ["EMS11", "EMS12", "EMS14", "EMS16", "SAS11"]
    for cid in catalog.cids:
        taken = 0
        for _, spec in catalog.for_cid(cid):
            assert spec.bit_mask() & taken == 0
            taken |= spec.bit_mask()
            assert spec.mid == cid


def test_table_examples(catalog):
    assert raw_to_physical(64, catalog["TEMP_ENG"]) == 0.0
    assert raw_to_physical(2, catalog["SAS_Speed"]) == 8.0
    assert physical_to_raw(0.0, catalog["TEMP_ENG"]).raw == 64
    assert physical_to_raw(10.04, catalog["SAS_Angle"]).raw == 100
    for spec in catalog:
        assert raw_to_physical(0, spec) == spec.offset


def test_clamping_is_flagged(catalog):
    spec = catalog["TQI"]
    q = physical_to_raw(spec.offset + spec.scale * spec.raw_max + 50, spec)
    assert q.clamped and q.raw == spec.raw_max
    q = physical_to_raw(spec.offset - 1, spec)
    assert q.clamped and q.raw == 0


def test_extract_examples():
    zero = bytes(8)
    assert extract_raw_bits(zero, 13, 17) == 0
    assert extract_raw_bits(b"\xff" + bytes(7), 0, 8) == 255
    assert extract_raw_bits(bytes([0, 0, 0x64, 0, 0, 0, 0, 0]), 16, 8) == 100
    with pytest.raises(ContractError):
        extract_raw_bits(zero, 60, 8)


@settings(max_examples=300, deadline=None)
@given(st.binary(min_size=8, max_size=8), st.integers(0, 63), st.integers(1, 64))
def test_extract_matches_bit_oracle(data, start, length):
    if start + length > 64:
        with pytest.raises(ContractError):
            extract_raw_bits(data, start, length)
        return
    assert extract_raw_bits(data, start, length) == bit_oracle(data, start, length)


@settings(max_examples=300, deadline=None)
@given(st.binary(min_size=8, max_size=8), st.integers(0, 63), st.integers(1, 16), st.data())
def test_motorola_matches_sawtooth_oracle(data, start, length, draw):
    try:
        got = extract_raw_bits(data, start, length, "motorola")
    except ContractError:
        return
    assert got == motorola_oracle(data, start, length)
    raw = draw.draw(st.integers(0, (1 << length) - 1))
    out = insert_raw_bits(data, start, length, raw, "motorola")
    assert extract_raw_bits(out, start, length, "motorola") == raw


@settings(max_examples=300, deadline=None)
@given(st.binary(min_size=8, max_size=8), st.integers(0, 63), st.integers(1, 32), st.data())
def test_insert_touches_only_its_bits(data, start, length, draw):
    if start + length > 64:
        return
    raw = draw.draw(st.integers(0, (1 << length) - 1))
    out = insert_raw_bits(data, start, length, raw)
    diff = int.from_bytes(data, "little") ^ int.from_bytes(out, "little")
    assert diff & ~(((1 << length) - 1) << start) == 0
    assert extract_raw_bits(out, start, length) == raw


def test_exhaustive_round_trip(catalog):
    for spec in catalog:
        assert spec.bit_len <= 16
        for raw in range(spec.raw_max + 1):
            assert physical_to_raw(raw_to_physical(raw, spec), spec).raw == raw


def test_decode_frame_examples(catalog):
    ems11 = decode_frame(CanFrame(0.0, 0x316, 8, bytes(8)), catalog)
    assert len(ems11) == 6
    assert decode_frame(CanFrame(0.0, 0x7FF, 8, bytes(8)), catalog) == []
    names = [r.signal for r in decode_frame(CanFrame(0.0, 0x2B0, 8, bytes(8)), catalog)]
    assert names == ["SAS_Angle", "SAS_Speed", "MsgCount", "CheckSum"]
    for r in ems11:
        spec = catalog[r.signal]
        assert r.value == spec.offset + spec.scale * r.raw


def test_encode_signal_isolation(catalog):
    rng = np.random.default_rng(3)
    pairs = catalog.for_cid(0x316)
    specs = [spec for _, spec in pairs]
    for _ in range(200):
        frame = CanFrame(1.0, 0x316, 8, rng.integers(0, 256, 8, dtype=np.uint8).tobytes())
        target, other = rng.choice(len(specs), 2, replace=False)
        (label, a), (_, b) = pairs[target], pairs[other]
        value = rng.uniform(a.offset, a.offset + a.scale * a.raw_max)
        out = encode_signal(frame, a, value)
        diff = int.from_bytes(frame.data, "little") ^ int.from_bytes(out.data, "little")
        assert diff & ~a.bit_mask() == 0
        assert extract_raw_bits(out.data, b.start_bit, b.bit_len) == extract_raw_bits(frame.data, b.start_bit, b.bit_len)
        decoded = {r.signal: r.value for r in decode_frame(out, catalog)}
        assert abs(decoded[label] - value) <= a.scale / 2 + 1e-9
        # writing the decoded value back changes nothing
        assert encode_signal(out, a, decoded[label]).data == out.data
    with pytest.raises(ContractError):
        encode_signal(CanFrame(0.0, 0x2B0, 8, bytes(8)), specs[0], 1.0)


def test_frame_contract():
    with pytest.raises(ContractError):
        CanFrame(0.0, 0x800, 8, bytes(8))
    with pytest.raises(ContractError):
        CanFrame(0.0, 0x100, 9, bytes(8))
    with pytest.raises(ContractError):
        CanFrame(0.0, 0x100, 8, bytes(7))


def test_parse_examples():
    f = parse_line("0.000000 02b0 8 00 00 00 00 00 00 00 00")
    assert (f.can_id, f.dlc, f.data) == (0x2B0, 8, bytes(8))
    f = parse_line("1.5 0316 5 01 02 03 04 05")
    assert f.data == bytes([1, 2, 3, 4, 5, 0, 0, 0])


def test_parse_errors_strict_and_lenient():
    lines = ["0.1 0316 2 01 02", "garbage", "0.2 0316 3 01 02", "0.3 0316 1 0g", "0.4 0316 1 ff"]
    with pytest.raises(TraceParseError) as exc:
        parse_trace(lines)
    assert exc.value.lineno == 2
    errors = []
    frames = parse_trace(lines, strict=False, errors=errors)
    assert [f.timestamp for f in frames] == [0.1, 0.4]
    assert [e.lineno for e in errors] == [2, 3, 4]


def test_trace_round_trip_synthetic():
    frames = synth_frames(0.02)[:10]
    text = serialize_trace(frames)
    again = parse_trace(text.splitlines())
    assert again == frames
    assert serialize_trace(again) == text


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 10**9), st.integers(0, 0x7FF), st.integers(0, 8),
                          st.binary(min_size=8, max_size=8)), min_size=1, max_size=10))
def test_trace_round_trip_random(rows):
    frames = [CanFrame(us / 1e6, cid, dlc, data[:dlc].ljust(8, b"\0")) for us, cid, dlc, data in rows]
    text = serialize_trace(frames)
    assert parse_trace(text.splitlines()) == frames
    assert format_frame(frames[0]) == text.splitlines()[0]


def test_catalog_file_round_trip(tmp_path, catalog):
    write_catalog(catalog, tmp_path / "catalog.csv")
    loaded = load_catalog(tmp_path / "catalog.csv")
    assert isinstance(loaded, SignalCatalog)
    assert loaded.labels == catalog.labels
    for a, b in zip(loaded.specs, catalog.specs):
        assert (a.name, a.cid, a.start_bit, a.bit_len, a.scale, a.offset) == \
            (b.name, b.cid, b.start_bit, b.bit_len, b.scale, b.offset)
        assert (a.max_value, a.min_value) == (b.max_value, b.min_value)


def test_motorola_catalog_decodes_its_own_encoding():
    cat = default_catalog("motorola")
    frames = synth_frames(0.05, cat)
    for f in frames:
        for r in decode_frame(f, cat):
            assert 0 <= r.raw <= cat[r.signal].raw_max


def test_vectorised_decoding_matches_frame_decoding(catalog):
    frames = synth_frames(0.5)
    series = decode_arrays(frames_to_arrays(frames), catalog)
    per_label: dict[str, list[float]] = {}
    for f in frames:
        for r in decode_frame(f, catalog):
            per_label.setdefault(r.signal, []).append(r.value)
    for label, values in per_label.items():
        np.testing.assert_array_equal(series[label][1], values)


def test_records_round_trip(catalog):
    frames = synth_frames(0.03)
    records = [r for f in frames for r in decode_frame(f, catalog)]
    buf = io.StringIO()
    assert write_records(records, buf) == len(records)
    buf.seek(0)
    assert read_records(buf) == records
