from __future__ import annotations

import hashlib
import random

import pytest

from rvtee.hsm import provision, seeded_entropy
from rvtee.seallog import SealLogStore

# RFC 4231 HMAC-SHA-256 test cases: (key, data, digest hex); case 5 is truncated to 128 bits.
RFC4231 = [
    (b"\x0b" * 20, b"Hi There",
     "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"),
    (b"Jefe", b"what do ya want for nothing?",
     "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"),
    (b"\xaa" * 20, b"\xdd" * 50,
     "773ea91e36800e46854db8ebd09181a72959098b3ef8c122d9635514ced565fe"),
    (bytes(range(1, 26)), b"\xcd" * 50,
     "82558a389a443c0ea4cc819899f2083a85f0faa3e578f8077a2e3ff46729665b"),
    (b"\x0c" * 20, b"Test With Truncation",
     "a3b6167473100ee06e0c796c2955552b"),
    (b"\xaa" * 131, b"Test Using Larger Than Block-Size Key - Hash Key First",
     "60e431591ee0b67f0d8a26aacbf5b77f8e0bc6213728c5140546040f0ee37f54"),
    (b"\xaa" * 131,
     b"This is a test using a larger than block-size key and a larger than block-size data. "
     b"The key needs to be hashed before being used by the HMAC algorithm.",
     "9b09ffa71b942fcb27635fbcd5b0e944bfdc63644f0713938a7f51535c3a35e2"),
]


def reference_hmac_sha256(key: bytes, msg: bytes) -> bytes:
    """HMAC built by hand from SHA-256 (ipad/opad construction), independent of the hmac module."""
    block = 64
    if len(key) > block:
        key = hashlib.sha256(key).digest()
    key = key.ljust(block, b"\0")
    inner = hashlib.sha256(bytes(b ^ 0x36 for b in key) + msg).digest()
    return hashlib.sha256(bytes(b ^ 0x5C for b in key) + inner).digest()


def make_store(directory, *, key_length=4096, chunk_size=32, log_ids=(1,), seed=0):
    hsm, safe = provision(seeded_entropy(seed), key_length, chunk_size)
    logs = {i: directory / f"log{i}.bin" for i in log_ids}
    store = SealLogStore(hsm, directory / "seal.log", logs)
    return store, hsm, safe, logs


@pytest.fixture
def store_factory(tmp_path):
    counter = iter(range(10**6))

    def factory(**kw):
        d = tmp_path / f"store{next(counter)}"
        d.mkdir()
        return make_store(d, **kw)
    return factory


@pytest.fixture
def rng():
    return random.Random(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
