"""Apply each kind of adversarial edit to a sealed store and watch the verifier classify it.

Run: python demos/02_tamper_drill.py
"""

from __future__ import annotations

import shutil
import tempfile
from pathlib import Path

from rvtee import SealLogStore, provision, tamper, verify


def build(directory: Path):
    hsm, safe = provision(key_length=64 * 32)
    logs = {1: directory / "events.log"}
    store = SealLogStore(hsm, directory / "seal.log", logs)
    for i in range(8):
        store.append_sealed(1, f"event {i}: door sensor ok\n".encode())
    return hsm, safe, logs, store.seal_log


DRILLS = {
    "flip one log byte": lambda logs, seal: tamper.flip_byte(logs[1], 40),
    "flip one SEAL_log byte": lambda logs, seal: tamper.flip_byte(seal, 22 + 64 * 3 + 40),
    "drop a middle record": lambda logs, seal: tamper.drop_record(seal, 2),
    "swap two records": lambda logs, seal: tamper.swap_records(seal, 1, 5),
    "truncate the log": lambda logs, seal: tamper.truncate(logs[1], 100),
    "shift a log offset": lambda logs, seal: tamper.edit_field(seal, 4, "log_offset", 3),
    "append unsealed bytes": lambda logs, seal: logs[1].open("ab").write(b"forged line\n"),
}


def main():
    root = Path(tempfile.mkdtemp(prefix="rvtee-drill-"))
    pristine = root / "pristine"
    pristine.mkdir()
    hsm, safe, logs, seal = build(pristine)
    attested = hsm.attested_key_offset()
    print(f"{'drill':<26} {'first failure':<28} all classes")
    for name, act in DRILLS.items():
        work = root / "work"
        shutil.rmtree(work, ignore_errors=True)
        shutil.copytree(pristine, work)
        wlogs = {1: work / "events.log"}
        act(wlogs, work / "seal.log")
        rep = verify(wlogs, work / "seal.log", safe, attested)
        index, cls = rep.first_failure
        where = "store" if index is None else f"record {index}"
        print(f"{name:<26} {cls.value + ' @ ' + where:<28} {', '.join(sorted(c.value for c in rep.classes))}")


if __name__ == "__main__":
    main()
