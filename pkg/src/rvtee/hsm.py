"""Simulated hardware security module holding a burn-on-read keystream.

The device owns a random keystream ``K`` split into fixed-size chunks.  Each
call to :meth:`SimulatedHSM.seal` consumes the next chunk: the chunk is
copied, its region overwritten with fresh random octets, used as the HMAC key
over the record fields and data, then discarded.  Past chunks therefore exist
only in the :class:`SafeCopy` handed out once at provisioning time and kept
on the forensic node.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .errors import EmptyData, InvalidGeometry, KeyExhausted, MalformedHeader, OutOfRange

Entropy = Callable[[int], bytes]

DIGEST_SIZE = 32
DEFAULT_CHUNK_SIZE = 32

SAFE_COPY_MAGIC = b"RVK1"
DEVICE_MAGIC = b"RVD1"
FORMAT_VERSION = 1

_FIELDS = struct.Struct("<QQQQ")
_KEYFILE_HEADER = struct.Struct("<4sHQQ")
_DEVICE_HEADER = struct.Struct("<4sHQQQ")


def hmac_sha256(key: bytes, message: bytes) -> bytes:
    return hmac.new(key, message, hashlib.sha256).digest()


def seal_message(log_id: int, log_offset: int, data_size: int, key_offset: int, data: bytes) -> bytes:
    """Serialize ``L || L_off || D_sz || K_off || D`` as the MAC input.

    The four integers are fixed-width u64 little-endian.
    """
    return _FIELDS.pack(log_id, log_offset, data_size, key_offset) + bytes(data)


def check_geometry(key_length: int, chunk_size: int) -> None:
    if chunk_size <= 0 or key_length <= 0 or key_length % chunk_size:
        raise InvalidGeometry(
            f"key_length ({key_length}) must be a positive multiple of chunk_size ({chunk_size})"
        )


@dataclass(frozen=True)
class SealTag:
    key_offset: int
    hmac: bytes

    def __post_init__(self):
        if len(self.hmac) != DIGEST_SIZE:
            raise ValueError(f"hmac must be {DIGEST_SIZE} octets, got {len(self.hmac)}")


@dataclass(frozen=True, repr=False)
class SafeCopy:
    """Pristine copy of the keystream, stored away from the monitored host."""

    key: bytes
    chunk_size: int

    def __post_init__(self):
        check_geometry(len(self.key), self.chunk_size)

    def __repr__(self):
        return f"SafeCopy(key_length={self.key_length}, chunk_size={self.chunk_size})"

    @property
    def key_length(self) -> int:
        return len(self.key)

    @property
    def capacity(self) -> int:
        return self.key_length // self.chunk_size

    def chunk(self, key_offset: int) -> bytes:
        if key_offset < 0 or key_offset % self.chunk_size or key_offset + self.chunk_size > self.key_length:
            raise OutOfRange(f"no chunk at key offset {key_offset}")
        return self.key[key_offset:key_offset + self.chunk_size]

    def to_bytes(self) -> bytes:
        return _KEYFILE_HEADER.pack(SAFE_COPY_MAGIC, FORMAT_VERSION, self.chunk_size, self.key_length) + self.key

    @classmethod
    def from_bytes(cls, raw: bytes) -> SafeCopy:
        if len(raw) < _KEYFILE_HEADER.size:
            raise MalformedHeader("keystream file shorter than its header")
        magic, version, chunk_size, key_length = _KEYFILE_HEADER.unpack_from(raw)
        if magic != SAFE_COPY_MAGIC or version != FORMAT_VERSION:
            raise MalformedHeader(f"not an RVK1 keystream file (magic={magic!r}, version={version})")
        key = raw[_KEYFILE_HEADER.size:]
        if len(key) != key_length:
            raise MalformedHeader(f"header declares {key_length} key octets, file holds {len(key)}")
        return cls(key=bytes(key), chunk_size=chunk_size)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> SafeCopy:
        return cls.from_bytes(Path(path).read_bytes())


class SimulatedHSM:
    """In-memory stand-in for the sealing device.

    Only :meth:`seal`, :meth:`attested_key_offset` and :meth:`is_burned` are
    meant to be called by the host; keystream bytes never leave the object
    through the public interface.
    """

    def __init__(self, keystream: bytearray, chunk_size: int, key_offset: int = 0,
                 entropy: Entropy = os.urandom):
        check_geometry(len(keystream), chunk_size)
        if key_offset < 0 or key_offset % chunk_size or key_offset > len(keystream):
            raise InvalidGeometry(f"bad key offset {key_offset}")
        self._key = keystream
        self._chunk_size = chunk_size
        self._key_offset = key_offset
        self._entropy = entropy
        self._lock = threading.Lock()
        self._backing: Path | None = None

    @property
    def chunk_size(self) -> int:
        return self._chunk_size

    @property
    def key_length(self) -> int:
        return len(self._key)

    @property
    def remaining(self) -> int:
        """Number of seals still available."""
        return (len(self._key) - self._key_offset) // self._chunk_size

    def attested_key_offset(self) -> int:
        return self._key_offset

    def is_burned(self, offset: int, length: int) -> bool:
        if offset < 0 or length < 0 or offset + length > len(self._key):
            raise OutOfRange(f"range [{offset}, {offset + length}) outside keystream of {len(self._key)} octets")
        return offset + length <= self._key_offset

    def seal(self, log_id: int, log_offset: int, data: bytes) -> SealTag:
        if not data:
            raise EmptyData("refusing to seal empty data")
        with self._lock:
            k_off = self._key_offset
            end = k_off + self._chunk_size
            if end > len(self._key):
                raise KeyExhausted(f"keystream exhausted at offset {k_off}")
            fresh = self._entropy(self._chunk_size)
            if len(fresh) != self._chunk_size:
                raise RuntimeError("entropy source returned a short read")
            chunk = bytearray(self._key[k_off:end])
            self._key[k_off:end] = fresh
            self._key_offset = end
            try:
                if self._backing is not None:
                    self._persist_burn(k_off, fresh, end)
                digest = hmac_sha256(bytes(chunk), seal_message(log_id, log_offset, len(data), k_off, data))
            finally:
                chunk[:] = bytes(len(chunk))
                del chunk
        return SealTag(key_offset=k_off, hmac=digest)

    # device non-volatile storage (simulation only)

    def _persist_burn(self, k_off: int, fresh: bytes, new_offset: int) -> None:
        with open(self._backing, "r+b") as fh:
            fh.seek(_DEVICE_HEADER.size + k_off)
            fh.write(fresh)
            fh.seek(_DEVICE_HEADER.size - 8)
            fh.write(struct.pack("<Q", new_offset))
            fh.flush()
            os.fsync(fh.fileno())

    def save(self, path) -> None:
        with self._lock:
            raw = _DEVICE_HEADER.pack(DEVICE_MAGIC, FORMAT_VERSION, self._chunk_size,
                                      len(self._key), self._key_offset) + bytes(self._key)
        tmp = Path(str(path) + ".tmp")
        tmp.write_bytes(raw)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path, entropy: Entropy = os.urandom, *, persistent: bool = True) -> SimulatedHSM:
        """Restore a device saved with :meth:`save`.

        With ``persistent`` every later burn is written back to ``path`` before
        :meth:`seal` returns, so a restart never sees a consumed chunk again.
        """
        raw = Path(path).read_bytes()
        if len(raw) < _DEVICE_HEADER.size:
            raise MalformedHeader("device file shorter than its header")
        magic, version, chunk_size, key_length, key_offset = _DEVICE_HEADER.unpack_from(raw)
        if magic != DEVICE_MAGIC or version != FORMAT_VERSION:
            raise MalformedHeader(f"not an RVD1 device file (magic={magic!r})")
        key = bytearray(raw[_DEVICE_HEADER.size:])
        if len(key) != key_length:
            raise MalformedHeader("device file length does not match its header")
        device = cls(key, chunk_size, key_offset, entropy)
        if persistent:
            device._backing = Path(path)
        return device


def provision(entropy: Entropy = os.urandom, key_length: int = 65536,
              chunk_size: int = DEFAULT_CHUNK_SIZE) -> tuple[SimulatedHSM, SafeCopy]:
    """Generate a fresh keystream; return the device and its one safe copy."""
    check_geometry(key_length, chunk_size)
    key = entropy(key_length)
    if len(key) != key_length:
        raise RuntimeError("entropy source returned a short read")
    return SimulatedHSM(bytearray(key), chunk_size, 0, entropy), SafeCopy(bytes(key), chunk_size)


def seeded_entropy(seed: int) -> Entropy:
    """Deterministic entropy for tests and drills. Not for real keys."""
    import random

    rng = random.Random(seed)
    return rng.randbytes
