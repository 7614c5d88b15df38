"""Forensic verification of sealed logs against the safe keystream copy."""

from __future__ import annotations

import enum
import hmac as _hmac
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .errors import MalformedHeader, OutOfRange
from .hsm import SafeCopy, hmac_sha256, seal_message
from .seallog import HEADER_SIZE, RECORD_SIZE, SealRecord, decode_header, decode_record


class FailureClass(str, enum.Enum):
    HMAC_MISMATCH = "HmacMismatch"
    COVERAGE_GAP = "CoverageGap"
    COVERAGE_OVERLAP = "CoverageOverlap"
    ORPHAN_TAIL = "OrphanTail"
    KEY_DESYNC = "KeyDesync"
    MALFORMED_RECORD = "MalformedRecord"
    MISSING_LOG = "MissingLog"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class Finding:
    failure: FailureClass
    detail: str
    record_index: int | None = None
    log_id: int | None = None
    byte_range: tuple[int, int] | None = None

    def to_dict(self) -> dict:
        return {
            "class": self.failure.value,
            "record_index": self.record_index,
            "log_id": self.log_id,
            "byte_range": list(self.byte_range) if self.byte_range else None,
            "detail": self.detail,
        }


@dataclass(frozen=True)
class LogCoverage:
    length: int | None
    covered: int
    records: int


@dataclass
class VerificationReport:
    records_checked: int = 0
    findings: list[Finding] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    coverage: dict[int, LogCoverage] = field(default_factory=dict)
    attested_offset_used: int | None = None
    capacity: int | None = None

    @property
    def passed(self) -> bool:
        return not self.findings

    @property
    def overall(self) -> str:
        return "pass" if self.passed else "fail"

    @property
    def first_failure(self) -> tuple[int | None, FailureClass] | None:
        if not self.findings:
            return None
        f = self.findings[0]
        return f.record_index, f.failure

    @property
    def classes(self) -> set[FailureClass]:
        return {f.failure for f in self.findings}

    def to_dict(self) -> dict:
        first = self.first_failure
        return {
            "overall": self.overall,
            "records_checked": self.records_checked,
            "first_failure": None if first is None else {"record_index": first[0], "class": first[1].value},
            "findings": [f.to_dict() for f in self.findings],
            "warnings": list(self.warnings),
            "coverage": {str(k): {"length": v.length, "covered": v.covered, "records": v.records}
                         for k, v in sorted(self.coverage.items())},
            "attested_offset_used": self.attested_offset_used,
            "capacity": self.capacity,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        lines = [f"overall: {self.overall.upper()}", f"records checked: {self.records_checked}"]
        if self.capacity is not None:
            lines.append(f"capacity: {self.capacity} appends ({self.capacity - self.records_checked} remaining)")
        lines.append("attested key offset: " + (
            "not supplied" if self.attested_offset_used is None else str(self.attested_offset_used)))
        for log_id, cov in sorted(self.coverage.items()):
            length = "missing" if cov.length is None else f"{cov.length} octets"
            lines.append(f"log {log_id}: {length}, {cov.records} records covering {cov.covered} octets")
        for f in self.findings:
            where = []
            if f.record_index is not None:
                where.append(f"record {f.record_index}")
            if f.log_id is not None:
                where.append(f"log {f.log_id}")
            if f.byte_range is not None:
                where.append(f"bytes [{f.byte_range[0]}, {f.byte_range[1]})")
            lines.append(f"FAIL {f.failure.value} ({', '.join(where) or 'store'}): {f.detail}")
        for w in self.warnings:
            lines.append(f"WARNING: {w}")
        return "\n".join(lines)


def recompute_hmac(record: SealRecord, data: bytes, safe_copy: SafeCopy) -> bytes:
    chunk = safe_copy.chunk(record.key_offset)
    return hmac_sha256(chunk, seal_message(record.log_id, record.log_offset, record.data_size,
                                          record.key_offset, data))


def check_coverage(records: Sequence[SealRecord], log_lengths: Mapping[int, int | None]
                   ) -> list[tuple[int, FailureClass, tuple[int, int]]]:
    """Check that each log's records tile ``[0, length)`` exactly.

    ``log_lengths`` maps log ids to file lengths, ``None`` for a missing file.
    """
    by_log: dict[int, list[tuple[int, int]]] = {}
    for r in records:
        by_log.setdefault(r.log_id, []).append((r.log_offset, r.end))

    problems: list[tuple[int, FailureClass, tuple[int, int]]] = []
    for log_id in sorted(set(by_log) | set(log_lengths)):
        intervals = sorted(by_log.get(log_id, []))
        length = log_lengths.get(log_id)
        if length is None:
            if intervals:
                problems.append((log_id, FailureClass.MISSING_LOG, (0, max(e for _, e in intervals))))
            continue
        cursor = 0
        for start, end in intervals:
            if start > cursor:
                problems.append((log_id, FailureClass.COVERAGE_GAP, (cursor, start)))
            elif start < cursor:
                problems.append((log_id, FailureClass.COVERAGE_OVERLAP, (start, min(cursor, end))))
            cursor = max(cursor, end)
        if cursor < length:
            problems.append((log_id, FailureClass.ORPHAN_TAIL, (cursor, length)))
        elif cursor > length:
            # records claim bytes the file no longer has
            problems.append((log_id, FailureClass.COVERAGE_GAP, (length, cursor)))
    return problems


def verify(logs: Mapping[int, os.PathLike | str], seal_log, safe_copy: SafeCopy,
           attested_key_offset: int | None = None) -> VerificationReport:
    """Authenticate every SEAL_log record in order, then check coverage and key consumption.

    Never raises on tampering; every anomaly becomes a finding in the report.
    """
    report = VerificationReport(attested_offset_used=attested_key_offset, capacity=safe_copy.capacity)
    chunk = safe_copy.chunk_size

    try:
        raw = Path(seal_log).read_bytes()
    except OSError as exc:
        report.findings.append(Finding(FailureClass.MALFORMED_RECORD, f"cannot read SEAL_log: {exc}"))
        return report
    try:
        header = decode_header(raw)
    except MalformedHeader as exc:
        report.findings.append(Finding(FailureClass.MALFORMED_RECORD, f"SEAL_log header: {exc}"))
        return report
    if (header.chunk_size, header.key_length) != (chunk, safe_copy.key_length):
        report.findings.append(Finding(
            FailureClass.MALFORMED_RECORD,
            f"SEAL_log geometry chunk={header.chunk_size} key={header.key_length} does not match "
            f"safe copy chunk={chunk} key={safe_copy.key_length}"))
        return report

    body = memoryview(raw)[HEADER_SIZE:]
    n_full, tail = divmod(len(body), RECORD_SIZE)
    records = [decode_record(bytes(body[i * RECORD_SIZE:(i + 1) * RECORD_SIZE])) for i in range(n_full)]

    contents: dict[int, bytes | None] = {}
    for log_id, p in logs.items():
        try:
            contents[int(log_id)] = Path(p).read_bytes()
        except OSError:
            contents[int(log_id)] = None

    for index, rec in enumerate(records):
        report.records_checked += 1
        finding = _check_record(index, rec, contents, safe_copy)
        if finding is not None:
            report.findings.append(finding)

    if tail:
        report.findings.append(Finding(
            FailureClass.MALFORMED_RECORD, f"trailing partial record ({tail} of {RECORD_SIZE} octets)",
            record_index=n_full))

    lengths = {log_id: (None if data is None else len(data)) for log_id, data in contents.items()}
    for log_id, cls, rng in check_coverage(records, lengths):
        if cls is FailureClass.MISSING_LOG:
            continue  # already reported per record
        report.findings.append(Finding(cls, _COVERAGE_DETAIL[cls], log_id=log_id, byte_range=rng))

    for log_id, length in lengths.items():
        mine = [r for r in records if r.log_id == log_id]
        report.coverage[log_id] = LogCoverage(length, sum(r.data_size for r in mine), len(mine))

    if attested_key_offset is not None:
        expected = len(records) * chunk
        if attested_key_offset != expected:
            report.findings.append(Finding(
                FailureClass.KEY_DESYNC,
                f"device reports {attested_key_offset} key octets consumed, SEAL_log accounts for {expected}"))
    else:
        report.warnings.append(
            "no attested key offset supplied: consumption unknown, removal of trailing records "
            "together with matching log truncation would not be detected")
    return report


_COVERAGE_DETAIL = {
    FailureClass.COVERAGE_GAP: "log bytes not accounted for by any record",
    FailureClass.COVERAGE_OVERLAP: "records overlap in the log",
    FailureClass.ORPHAN_TAIL: "unsealed bytes past the last sealed record",
    FailureClass.MISSING_LOG: "records reference a log that is not present",
}


def _check_record(index: int, rec: SealRecord, contents: Mapping[int, bytes | None],
                  safe_copy: SafeCopy) -> Finding | None:
    if rec.log_id not in contents or contents[rec.log_id] is None:
        return Finding(FailureClass.MISSING_LOG, f"log {rec.log_id} is not available",
                       record_index=index, log_id=rec.log_id)
    data = contents[rec.log_id]
    rng = (rec.log_offset, rec.end)
    if rec.data_size == 0:
        return Finding(FailureClass.MALFORMED_RECORD, "record with zero data size",
                       record_index=index, log_id=rec.log_id, byte_range=rng)
    if rec.end > len(data):
        return Finding(FailureClass.COVERAGE_GAP,
                       f"record covers bytes past the end of the log ({len(data)} octets)",
                       record_index=index, log_id=rec.log_id, byte_range=rng)
    try:
        digest = recompute_hmac(rec, data[rec.log_offset:rec.end], safe_copy)
    except OutOfRange:
        return Finding(FailureClass.KEY_DESYNC, f"key offset {rec.key_offset} is not a chunk of the keystream",
                       record_index=index, log_id=rec.log_id, byte_range=rng)
    if not _hmac.compare_digest(digest, rec.hmac):
        return Finding(FailureClass.HMAC_MISMATCH, "HMAC does not match record fields and log data",
                       record_index=index, log_id=rec.log_id, byte_range=rng)
    expected = index * safe_copy.chunk_size
    if rec.key_offset != expected:
        return Finding(FailureClass.KEY_DESYNC,
                       f"authentic record at position {index} carries key offset {rec.key_offset}, "
                       f"expected {expected} (records removed or reordered)",
                       record_index=index, log_id=rec.log_id, byte_range=rng)
    return None


def verify_store(registry_path, seal_log, safe_copy: SafeCopy,
                 attested_key_offset: int | None = None) -> VerificationReport:
    from .seallog import load_registry

    return verify(load_registry(registry_path), seal_log, safe_copy, attested_key_offset)


__all__ = [
    "FailureClass", "Finding", "LogCoverage", "VerificationReport",
    "check_coverage", "recompute_hmac", "verify", "verify_store",
]
