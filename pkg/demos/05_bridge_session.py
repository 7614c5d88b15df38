"""Run the event bridge on a local socket and stream the instrumented chat client into it.

The bridge seals every raw event line, runs the property monitors, scans
outbound payloads for the room secret and sends flag commands back.

Run: python demos/05_bridge_session.py
"""

from __future__ import annotations

import tempfile
from pathlib import Path

from rvtee import SealLogStore, SensitivePattern, TaintScanner, load_spec, provision, verify
from rvtee.bridge import BridgeClient, BridgeServer
from rvtee.demo.chat import run_scenario
from rvtee.fixtures import HANDSHAKE, fixture_text


def main():
    tmp = Path(tempfile.mkdtemp(prefix="rvtee-bridge-"))
    hsm, safe = provision(key_length=4096 * 32)
    logs = {1: tmp / "events.log", 2: tmp / "verdicts.log"}
    store = SealLogStore(hsm, tmp / "seal.log", logs)
    scanner = TaintScanner([SensitivePattern("room-secret", b"room-secret")])
    server = BridgeServer(f"unix:{tmp / 'bridge.sock'}", load_spec(fixture_text(HANDSHAKE)), store,
                          event_log_id=1, verdict_log_id=2, scanner=scanner)
    server.start()
    try:
        result = run_scenario("A", messages=5, pause=0.01, endpoint=server.endpoint)
        print(f"honest chat session: {result.seconds:.2f} s")
        with BridgeClient(server.endpoint) as rogue:
            rogue.emit("ra_tee", "session", "out", b"traffic before any key exchange")
            rogue.emit("ra_ree", "send", "out", b"debug dump: room-secret")
        server.wait_sessions(2, timeout=10)
    finally:
        server.close()

    for name, s in zip(("chat client", "rogue client"), server.summaries):
        print(f"{name}: {s.events} events sealed={s.sealed} violations={s.violations} "
              f"taint={s.taint_matches} commands={s.commands}")
    print("commands sent to the rogue client:", [c.encode().decode().strip() for c in rogue.commands])
    print("store verifies:", verify(logs, store.seal_log, safe, hsm.attested_key_offset()).overall)


if __name__ == "__main__":
    main()
