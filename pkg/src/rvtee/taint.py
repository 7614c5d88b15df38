"""Taint inference: find approximate copies of sensitive byte patterns in outbound buffers.

Two stages per pattern:

* a coarse filter slides a window of ``window_size`` octets by ``stride`` and
  keeps windows containing at least ``coarse_threshold`` of the pattern's
  distinct q-grams;
* surviving windows, padded on both sides, go through a substring edit
  distance search (free start and end in the buffer) that reports spans within
  ``max_edit_distance`` of the pattern.

With ``u`` distinct pattern q-grams, a span at edit distance ``k`` still holds
at least ``u - k*q`` of them, so any threshold at or below ``1 - k*q/u`` loses
nothing as long as matches fit in one window (``stride <= window_size - m - k``).
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

_EPS = 1e-12


@dataclass(frozen=True)
class SensitivePattern:
    id: str
    data: bytes

    def __post_init__(self):
        if len(self.data) < 4:
            raise ValueError(f"pattern {self.id!r} must be at least 4 octets")
        object.__setattr__(self, "data", bytes(self.data))


@dataclass(frozen=True)
class TaintConfig:
    window_size: int = 1024
    stride: int = 512
    coarse_threshold: float = 0.5
    max_edit_distance: int = 2
    qgram_size: int = 4

    def __post_init__(self):
        if not 1 <= self.stride <= self.window_size:
            raise ValueError("stride must satisfy 1 <= stride <= window_size")
        if not 0 < self.coarse_threshold <= 1:
            raise ValueError("coarse_threshold must be in (0, 1]")
        if self.max_edit_distance < 0:
            raise ValueError("max_edit_distance must be >= 0")
        if self.qgram_size < 1:
            raise ValueError("qgram_size must be >= 1")


@dataclass(frozen=True, order=True)
class TaintMatch:
    buffer_offset: int
    pattern_id: str
    span_length: int
    edit_distance: int


def permissive_threshold(pattern: bytes, k: int, q: int) -> float:
    """Largest threshold that provably keeps every match at distance <= k (0 if none does)."""
    u = len(distinct_qgrams(pattern, q))
    return max(0.0, 1.0 - k * q / u) if u else 0.0


def distinct_qgrams(data: bytes, q: int) -> set[bytes]:
    return {data[i:i + q] for i in range(len(data) - q + 1)}


# --- coarse filter -------------------------------------------------------------

def _qgram_ids(buf: np.ndarray, data: bytes, pattern: bytes, q: int) -> tuple[np.ndarray, int]:
    """Per buffer position, the index of the pattern q-gram starting there, or -1."""
    n_pos = len(buf) - q + 1
    grams = sorted(distinct_qgrams(pattern, q))
    if n_pos <= 0:
        return np.empty(0, dtype=np.int64), len(grams)
    if q <= 8:
        keys = np.zeros(n_pos, dtype=np.uint64)
        for j in range(q):
            keys |= buf[j:j + n_pos].astype(np.uint64) << np.uint64(8 * j)
        pk = np.array([int.from_bytes(g, "little") for g in grams], dtype=np.uint64)
        pk.sort()
        idx = np.searchsorted(pk, keys)
        safe = np.minimum(idx, len(pk) - 1)
        return np.where(pk[safe] == keys, safe, -1).astype(np.int64), len(grams)
    lookup = {g: i for i, g in enumerate(grams)}
    return np.fromiter((lookup.get(data[i:i + q], -1) for i in range(n_pos)),
                       dtype=np.int64, count=n_pos), len(grams)


def window_offsets(n: int, window_size: int, stride: int) -> list[int]:
    """Window starts covering ``[0, n)``; the last window may be short."""
    if n == 0:
        return []
    offsets = [0]
    while offsets[-1] + window_size < n:
        offsets.append(offsets[-1] + stride)
    return offsets


def coarse_scan(buffer: bytes, pattern: SensitivePattern, config: TaintConfig) -> list[tuple[int, int]]:
    """Candidate windows ``(offset, length)`` whose q-gram overlap meets the threshold."""
    data = bytes(buffer)
    n, q = len(data), config.qgram_size
    if n == 0:
        return []
    buf = np.frombuffer(data, dtype=np.uint8)
    ids, u = _qgram_ids(buf, data, pattern.data, q)
    if u == 0:
        return []
    need = config.coarse_threshold * u - _EPS
    out = []
    for off in window_offsets(n, config.window_size, config.stride):
        length = min(config.window_size, n - off)
        grams = ids[off:off + length - q + 1] if length >= q else ids[:0]
        present = np.unique(grams[grams >= 0]).size
        if present >= need:
            out.append((off, length))
    return out


# --- fine matching ---------------------------------------------------------------

def end_hits(text: bytes, pattern: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Substring edit distance for every end position.

    Returns ``(cost, start)`` arrays of length ``len(text) + 1``: ``cost[e]`` is
    the least edit distance between ``pattern`` and any ``text[s:e]``, and
    ``start[e]`` the leftmost ``s`` achieving it.  Rows are filled one pattern
    character at a time; (cost, start) pairs are packed into one int64 so that a
    plain minimum orders them lexicographically.
    """
    t = np.frombuffer(bytes(text), dtype=np.uint8)
    n = len(t)
    big = np.int64(n + 1)
    ramp = np.arange(n + 1, dtype=np.int64) * big
    row = np.arange(n + 1, dtype=np.int64)
    for ch in bytes(pattern):
        best = np.empty(n + 1, dtype=np.int64)
        best[0] = row[0] + big
        np.minimum(row[:-1] + (t != ch) * big, row[1:] + big, out=best[1:])
        row = np.minimum.accumulate(best - ramp) + ramp
    return row // big, row % big


def _tiebreak_key(d: int, s: int, e: int, m: int) -> tuple[int, int, int, int]:
    # lowest distance, leftmost, length closest to the pattern, shortest
    return d, s, abs(e - s - m), e


def _select(hits: Iterable[tuple[int, int, int]], m: int) -> list[tuple[int, int, int]]:
    """Greedy non-overlapping selection of ``(distance, start, end)`` hits."""
    ordered = sorted(hits, key=lambda h: _tiebreak_key(h[0], h[1], h[2], m))
    starts: list[int] = []
    chosen: dict[int, tuple[int, int, int]] = {}
    for d, s, e in ordered:
        i = bisect.bisect_left(starts, s)
        if i > 0 and chosen[starts[i - 1]][2] > s:
            continue
        if i < len(starts) and starts[i] < e:
            continue
        starts.insert(i, s)
        chosen[s] = (d, s, e)
    return [chosen[s] for s in starts]


def _check_k(pattern: bytes, k: int) -> None:
    if k < 0:
        raise ValueError("k must be >= 0")
    if k >= len(pattern):
        raise ValueError("k must be smaller than the pattern length (the empty span would match)")


def fine_match(slice_: bytes, pattern: SensitivePattern | bytes, k: int) -> tuple[int, tuple[int, int]] | None:
    """Best approximate occurrence of ``pattern`` in ``slice_`` if within ``k`` edits.

    Returns ``(distance, (start, end))``.  Ties go to the leftmost start, then
    the span length closest to the pattern length, then the shorter span.
    """
    pat = pattern.data if isinstance(pattern, SensitivePattern) else bytes(pattern)
    _check_k(pat, k)
    cost, start = end_hits(slice_, pat)
    if len(cost) <= 1:
        return None
    dmin = int(cost[1:].min())
    if dmin > k:
        return None
    ends = np.nonzero(cost == dmin)[0]
    ends = ends[ends > 0]
    d, s, e = min(((dmin, int(start[e]), int(e)) for e in ends),
                  key=lambda h: _tiebreak_key(h[0], h[1], h[2], len(pat)))
    return d, (s, e)


def find_all(buffer: bytes, pattern: SensitivePattern | bytes, k: int) -> list[tuple[int, int, int]]:
    """Exhaustive search over the whole buffer: non-overlapping ``(distance, start, end)`` spans."""
    pat = pattern.data if isinstance(pattern, SensitivePattern) else bytes(pattern)
    _check_k(pat, k)
    cost, start = end_hits(buffer, pat)
    ends = np.nonzero(cost <= k)[0]
    return _select(((int(cost[e]), int(start[e]), int(e)) for e in ends if e > 0), len(pat))


def _merge(intervals: list[tuple[int, int]]) -> list[tuple[int, int]]:
    merged: list[list[int]] = []
    for a, b in sorted(intervals):
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return [(a, b) for a, b in merged]


def scan_pattern(buffer: bytes, pattern: SensitivePattern, config: TaintConfig) -> list[tuple[int, int, int]]:
    data = bytes(buffer)
    m, k = len(pattern.data), config.max_edit_distance
    _check_k(pattern.data, k)
    if config.qgram_size > m:
        raise ValueError(f"qgram_size {config.qgram_size} exceeds length of pattern {pattern.id!r}")
    pad = m + k
    regions = _merge([(max(0, off - pad), min(len(data), off + length + pad))
                      for off, length in coarse_scan(data, pattern, config)])
    hits = []
    for a, b in regions:
        cost, start = end_hits(data[a:b], pattern.data)
        # ends closer than m+k to a cut region edge could have lost their best start
        lo = 1 if a == 0 else pad
        for e in np.nonzero(cost[lo:] <= k)[0] + lo:
            hits.append((int(cost[e]), a + int(start[e]), a + int(e)))
    return _select(hits, m)


def scan(buffer: bytes, patterns: Sequence[SensitivePattern], config: TaintConfig | None = None) -> list[TaintMatch]:
    config = config or TaintConfig()
    matches = []
    for p in patterns:
        for d, s, e in scan_pattern(buffer, p, config):
            matches.append(TaintMatch(buffer_offset=s, pattern_id=p.id, span_length=e - s, edit_distance=d))
    return sorted(matches)


class TaintScanner:
    def __init__(self, patterns: Sequence[SensitivePattern] = (), config: TaintConfig | None = None):
        self.config = config or TaintConfig()
        self.patterns: list[SensitivePattern] = []
        for p in patterns:
            self.register(p)

    def register(self, pattern: SensitivePattern) -> None:
        if any(p.id == pattern.id for p in self.patterns):
            raise ValueError(f"pattern id {pattern.id!r} already registered")
        if self.config.qgram_size > len(pattern.data):
            raise ValueError(f"pattern {pattern.id!r} is shorter than qgram_size")
        self.patterns.append(pattern)

    def scan(self, buffer: bytes) -> list[TaintMatch]:
        return scan(buffer, self.patterns, self.config)


def load_patterns(path) -> list[SensitivePattern]:
    """Read ``id<TAB>hex`` lines."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            pid, hexdata = line.split("\t")
            out.append(SensitivePattern(pid, bytes.fromhex(hexdata.strip())))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def save_patterns(path, patterns: Iterable[SensitivePattern]) -> None:
    Path(path).write_text("".join(f"{p.id}\t{p.data.hex()}\n" for p in patterns))
