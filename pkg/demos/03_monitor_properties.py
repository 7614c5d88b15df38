"""Feed boundary events through the shipped property automata and seal their verdicts.

Run: python demos/03_monitor_properties.py
"""

from __future__ import annotations

import tempfile
from pathlib import Path

from rvtee import Boundary, Direction, Event, Monitor, SealLogStore, load_spec, provision, verify
from rvtee.fixtures import HANDSHAKE, KEY_EGRESS, fixture_text

TEE, REE = Boundary.RA_TEE, Boundary.RA_REE

SCRIPT = [
    (TEE, "keyex", Direction.OUT, b"commitment"),
    (TEE, "session", Direction.OUT, b"ciphertext"),
    (TEE, "get_key", Direction.IN, b""),
    (REE, "send", Direction.OUT, b"MSG here is the KEY 00ff"),  # leak while key is held
    (TEE, "reset", Direction.IN, b""),
    (TEE, "keyex", Direction.OUT, b"second key exchange"),  # handshake must happen once
]


def main():
    tmp = Path(tempfile.mkdtemp(prefix="rvtee-mon-"))
    automata = load_spec(fixture_text(HANDSHAKE) + "\n" + fixture_text(KEY_EGRESS))
    for a in automata:
        print(f"property {a.id}: {len(a.states)} states, {len(a.transitions)} transitions")

    hsm, safe = provision(key_length=64 * 32)
    logs = {2: tmp / "verdicts.log"}
    store = SealLogStore(hsm, tmp / "seal.log", logs)
    monitor = Monitor(automata, store, verdict_log_id=2)

    for seq, (boundary, channel, direction, payload) in enumerate(SCRIPT, 1):
        verdicts = monitor.process(Event(seq, seq, boundary, channel, direction, payload))
        shown = ", ".join(f"{v.kind.value}({v.property_id})" for v in verdicts) or "-"
        print(f"seq {seq}: {boundary.value}/{channel}/{direction.value:<3} -> {shown}")

    print("\nsealed verdict log:")
    print(logs[2].read_text(), end="")
    print("verify:", verify(logs, store.seal_log, safe, hsm.attested_key_offset()).overall)


if __name__ == "__main__":
    main()
