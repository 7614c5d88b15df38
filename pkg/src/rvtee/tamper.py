"""Adversary actions for drills: each function applies one mutation to store files in place."""

from __future__ import annotations

from pathlib import Path

from .seallog import HEADER_SIZE, RECORD_SIZE, SealRecord, decode_record, encode_record

RECORD_FIELDS = ("log_id", "log_offset", "data_size", "key_offset", "hmac")
FIELD_SPANS = {
    "log_id": (0, 8),
    "log_offset": (8, 16),
    "data_size": (16, 24),
    "key_offset": (24, 32),
    "hmac": (32, 64),
}


def field_at(offset_in_record: int) -> str:
    for name, (a, b) in FIELD_SPANS.items():
        if a <= offset_in_record < b:
            return name
    raise ValueError(offset_in_record)


def record_count(seal_log) -> int:
    return (Path(seal_log).stat().st_size - HEADER_SIZE) // RECORD_SIZE


def flip_byte(path, offset: int, mask: int = 0x01) -> None:
    if not 0 < mask < 256:
        raise ValueError("mask must be in 1..255")
    with open(path, "r+b") as fh:
        fh.seek(offset)
        b = fh.read(1)
        if not b:
            raise ValueError(f"offset {offset} is past the end of {path}")
        fh.seek(offset)
        fh.write(bytes([b[0] ^ mask]))


def truncate(path, length: int) -> None:
    size = Path(path).stat().st_size
    if not 0 <= length < size:
        raise ValueError(f"truncation to {length} does not shorten a {size}-octet file")
    with open(path, "r+b") as fh:
        fh.truncate(length)


def _records(seal_log) -> tuple[bytes, list[bytes]]:
    raw = Path(seal_log).read_bytes()
    body = raw[HEADER_SIZE:]
    return raw[:HEADER_SIZE], [body[i:i + RECORD_SIZE] for i in range(0, len(body), RECORD_SIZE)]


def _write(seal_log, header: bytes, records: list[bytes]) -> None:
    Path(seal_log).write_bytes(header + b"".join(records))


def drop_record(seal_log, index: int) -> SealRecord:
    header, recs = _records(seal_log)
    dropped = recs.pop(index)
    _write(seal_log, header, recs)
    return decode_record(dropped)


def swap_records(seal_log, i: int, j: int) -> None:
    header, recs = _records(seal_log)
    if i == j:
        raise ValueError("swap needs two distinct records")
    recs[i], recs[j] = recs[j], recs[i]
    _write(seal_log, header, recs)


def edit_field(seal_log, index: int, field: str, value) -> tuple[SealRecord, SealRecord]:
    """Overwrite one record field; returns (before, after)."""
    if field not in RECORD_FIELDS:
        raise ValueError(f"unknown field {field!r}")
    header, recs = _records(seal_log)
    before = decode_record(recs[index])
    after = SealRecord(**{**before.__dict__, field: value})
    recs[index] = encode_record(after)
    _write(seal_log, header, recs)
    return before, after
