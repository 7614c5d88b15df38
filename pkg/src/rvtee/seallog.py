"""Sealed append-only logs.

Every append writes the data to its log file, asks the device for a seal tag
over it, and appends a fixed-width 64-octet record to a single SEAL_log that
covers all registered logs.

SEAL_log layout::

    "RVS1" | version u16 | chunk_size u64 | key_length u64 | record*

    record = log_id u64 | log_offset u64 | data_size u64 | key_offset u64 | hmac[32]

All integers are little-endian.
"""

from __future__ import annotations

import logging
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

from .errors import EmptyData, KeyExhausted, MalformedHeader, MalformedRecord, StorageFailure, UnknownLog
from .hsm import DIGEST_SIZE, FORMAT_VERSION, SimulatedHSM

logger = logging.getLogger(__name__)

SEAL_LOG_MAGIC = b"RVS1"
_HEADER = struct.Struct("<4sHQQ")
_RECORD = struct.Struct("<QQQQ32s")
HEADER_SIZE = _HEADER.size
RECORD_SIZE = _RECORD.size

_U64_MAX = 2**64 - 1


@dataclass(frozen=True)
class SealRecord:
    log_id: int
    log_offset: int
    data_size: int
    key_offset: int
    hmac: bytes

    @property
    def end(self) -> int:
        return self.log_offset + self.data_size


@dataclass(frozen=True)
class SealLogHeader:
    version: int
    chunk_size: int
    key_length: int


def encode_record(record: SealRecord) -> bytes:
    for name in ("log_id", "log_offset", "data_size", "key_offset"):
        value = getattr(record, name)
        if not 0 <= value <= _U64_MAX:
            raise MalformedRecord(f"{name}={value} does not fit in u64")
    if len(record.hmac) != DIGEST_SIZE:
        raise MalformedRecord(f"hmac must be {DIGEST_SIZE} octets")
    return _RECORD.pack(record.log_id, record.log_offset, record.data_size, record.key_offset, record.hmac)


def decode_record(raw: bytes) -> SealRecord:
    if len(raw) != RECORD_SIZE:
        raise MalformedRecord(f"record must be {RECORD_SIZE} octets, got {len(raw)}")
    return SealRecord(*_RECORD.unpack(raw))


def encode_header(chunk_size: int, key_length: int) -> bytes:
    return _HEADER.pack(SEAL_LOG_MAGIC, FORMAT_VERSION, chunk_size, key_length)


def decode_header(raw: bytes) -> SealLogHeader:
    if len(raw) < HEADER_SIZE:
        raise MalformedHeader(f"SEAL_log header needs {HEADER_SIZE} octets, got {len(raw)}")
    magic, version, chunk_size, key_length = _HEADER.unpack_from(raw)
    if magic != SEAL_LOG_MAGIC:
        raise MalformedHeader(f"bad SEAL_log magic {magic!r}")
    if version != FORMAT_VERSION:
        raise MalformedHeader(f"unsupported SEAL_log version {version}")
    return SealLogHeader(version, chunk_size, key_length)


def read_header(path) -> SealLogHeader:
    with open(path, "rb") as fh:
        return decode_header(fh.read(HEADER_SIZE))


def iter_records(path) -> Iterator[SealRecord]:
    """Yield records in file order.

    A trailing partial record raises :class:`MalformedRecord` after all
    complete records have been yielded.
    """
    with open(path, "rb") as fh:
        decode_header(fh.read(HEADER_SIZE))
        index = 0
        while True:
            raw = fh.read(RECORD_SIZE)
            if not raw:
                return
            if len(raw) != RECORD_SIZE:
                raise MalformedRecord(f"trailing partial record #{index} ({len(raw)} of {RECORD_SIZE} octets)")
            yield decode_record(raw)
            index += 1


def load_registry(path) -> dict[int, Path]:
    """Parse ``log_id<TAB>path`` lines; relative paths resolve against the registry's directory."""
    path = Path(path)
    base = path.parent
    registry: dict[int, Path] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            raw_id, raw_path = line.split("\t", 1)
            log_id = int(raw_id)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected 'log_id<TAB>path'") from None
        if log_id in registry:
            raise ValueError(f"{path}:{lineno}: duplicate log id {log_id}")
        p = Path(raw_path)
        registry[log_id] = p if p.is_absolute() else base / p
    return registry


def save_registry(path, registry: Mapping[int, os.PathLike | str]) -> None:
    path = Path(path)
    lines = []
    for log_id, p in sorted(registry.items()):
        p = Path(p)
        try:
            p = p.relative_to(path.parent)
        except ValueError:
            pass
        lines.append(f"{log_id}\t{p}\n")
    path.write_text("".join(lines))


def coverage_end(records, log_id: int) -> int:
    return max((r.end for r in records if r.log_id == log_id), default=0)


class SealLogStore:
    """Single-writer front-end pairing log files with the SEAL_log.

    Opening an existing store never re-seals anything: bytes past the last
    sealed record of a log are reported in :attr:`orphans` and stay
    unsealed, so the verifier keeps flagging them.
    """

    def __init__(self, hsm: SimulatedHSM, seal_log, registry: Mapping[int, os.PathLike | str],
                 *, fsync: bool = False):
        self.hsm = hsm
        self.seal_log = Path(seal_log)
        self.registry = {int(k): Path(v) for k, v in registry.items()}
        self.fsync = fsync
        self.orphans: dict[int, tuple[int, int]] = {}
        self.warnings: list[str] = []
        self._lock = threading.Lock()
        self._poisoned: str | None = None
        self._records = 0

        if not self.seal_log.exists() or self.seal_log.stat().st_size == 0:
            self.seal_log.parent.mkdir(parents=True, exist_ok=True)
            self.seal_log.write_bytes(encode_header(hsm.chunk_size, hsm.key_length))
            records = []
        else:
            header = read_header(self.seal_log)
            if (header.chunk_size, header.key_length) != (hsm.chunk_size, hsm.key_length):
                raise MalformedHeader("SEAL_log geometry does not match the device")
            records = list(iter_records(self.seal_log))
        self._records = len(records)

        self._next: dict[int, int] = {}
        for log_id, p in self.registry.items():
            length = p.stat().st_size if p.exists() else 0
            self._next[log_id] = length
            covered = coverage_end(records, log_id)
            if length > covered:
                self.orphans[log_id] = (covered, length)
                logger.warning("log %d has %d unsealed octets at [%d, %d)", log_id,
                               length - covered, covered, length)
        consumed = hsm.attested_key_offset()
        if consumed != self._records * hsm.chunk_size:
            msg = (f"device consumed {consumed} key octets but SEAL_log holds "
                   f"{self._records} records of {hsm.chunk_size}")
            self.warnings.append(msg)
            logger.warning(msg)

    @property
    def record_count(self) -> int:
        return self._records

    def next_log_offset(self, log_id: int) -> int:
        try:
            return self._next[log_id]
        except KeyError:
            raise UnknownLog(log_id) from None

    def append_sealed(self, log_id: int, data: bytes) -> SealRecord:
        data = bytes(data)
        with self._lock:
            if self._poisoned:
                raise StorageFailure(f"store disabled after earlier failure: {self._poisoned}")
            if log_id not in self.registry:
                raise UnknownLog(log_id)
            if not data:
                raise EmptyData("refusing to append empty data")
            if self.hsm.remaining == 0:
                raise KeyExhausted("keystream exhausted; nothing written")

            path = self.registry[log_id]
            l_off = self._next[log_id]
            try:
                self._append_bytes(path, data)
            except OSError as exc:
                self._rollback(path, l_off)
                raise StorageFailure(f"writing log {log_id}: {exc}") from exc

            try:
                tag = self.hsm.seal(log_id, l_off, data)
            except BaseException:
                self._rollback(path, l_off)
                raise

            record = SealRecord(log_id, l_off, len(data), tag.key_offset, tag.hmac)
            seal_size = HEADER_SIZE + self._records * RECORD_SIZE
            try:
                self._append_bytes(self.seal_log, encode_record(record))
            except OSError as exc:
                # The chunk is burned already; the store cannot stay consistent.
                self._rollback(path, l_off)
                self._rollback(self.seal_log, seal_size)
                self._poisoned = f"SEAL_log write failed: {exc}"
                raise StorageFailure(self._poisoned) from exc

            self._next[log_id] = l_off + len(data)
            self._records += 1
            return record

    def _append_bytes(self, path: Path, data: bytes) -> None:
        with open(path, "ab") as fh:
            fh.write(data)
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())

    @staticmethod
    def _rollback(path: Path, size: int) -> None:
        try:
            with open(path, "r+b") as fh:
                fh.truncate(size)
        except OSError:
            logger.exception("rollback of %s to %d octets failed", path, size)
