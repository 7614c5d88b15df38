"""Seal a few log lines, then verify them against the forensic safe copy.

Run: python demos/01_seal_and_verify.py
"""

from __future__ import annotations

import tempfile
from pathlib import Path

from rvtee import SealLogStore, provision, verify


def main():
    tmp = Path(tempfile.mkdtemp(prefix="rvtee-demo-"))
    # 16 chunks of 32 octets: room for 16 appends
    hsm, safe = provision(key_length=16 * 32, chunk_size=32)
    logs = {1: tmp / "auth.log", 2: tmp / "app.log"}
    store = SealLogStore(hsm, tmp / "seal.log", logs)

    for line in (b"user alice logged in\n", b"sudo attempt by bob\n"):
        rec = store.append_sealed(1, line)
        print(f"log 1 @ {rec.log_offset:>3}: {rec.data_size:>2} octets, key chunk at {rec.key_offset}")
    store.append_sealed(2, b"service started\n")

    print(f"device has burned {hsm.attested_key_offset()} octets; {hsm.remaining} seals left")
    print("first chunk burned:", hsm.is_burned(0, 32), "| still in the safe copy:", len(safe.chunk(0)), "octets")

    report = verify(logs, store.seal_log, safe, attested_key_offset=hsm.attested_key_offset())
    print()
    print(report.to_text())


if __name__ == "__main__":
    main()
