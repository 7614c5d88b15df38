"""Scripted group-chat fixture with one optionally instrumented participant.

A relay server and three clients run on localhost.  Participant 1 either
creates the room (scenario A) or joins it (scenario B).  Every client derives
a session key through a simulated trusted call, then sends scripted messages
with artificial pauses between them.

Instrumentation hooks the client's trusted calls and socket I/O at source
level and streams one event per call to a bridge; set
``RVTEE_BRIDGE_ENDPOINT`` (or pass ``endpoint``) to enable it::

    RVTEE_BRIDGE_ENDPOINT=127.0.0.1:7878 python -m rvtee.demo.chat --scenario A
"""

from __future__ import annotations

import argparse
import hashlib
import hmac
import os
import socket
import socketserver
import threading
import time
from dataclasses import dataclass

from ..bridge import ENDPOINT_ENV, BridgeClient

ROOM = "lab"
SCENARIOS = ("A", "B")


class _Relay(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self):
        super().__init__(("127.0.0.1", 0), _RelayHandler)
        self.clients: dict[int, socket.socket] = {}
        self.lock = threading.Lock()


class _RelayHandler(socketserver.StreamRequestHandler):
    def handle(self):
        relay: _Relay = self.server  # type: ignore[assignment]
        me = None
        for line in self.rfile:
            words = line.split(b" ", 2)
            if words[0] == b"HELLO":
                me = int(words[1])
                with relay.lock:
                    relay.clients[me] = self.connection
                continue
            if words[0] == b"BYE":
                break
            with relay.lock:
                peers = [s for cid, s in relay.clients.items() if cid != me]
            for s in peers:
                try:
                    s.sendall(line)
                except OSError:
                    pass
        with relay.lock:
            relay.clients.pop(me, None)


class TrustedModule:
    """Stand-in for the trusted side: holds the session key, encrypts and decrypts."""

    def __init__(self, seed: bytes):
        self._seed = seed
        self._key = b""

    def derive_key(self, room: bytes) -> bytes:
        self._key = hashlib.sha256(self._seed + room).digest()
        return hashlib.sha256(b"commit" + self._key).digest()

    def encrypt(self, plaintext: bytes) -> bytes:
        pad = hmac.new(self._key, len(plaintext).to_bytes(4, "big"), hashlib.sha256).digest()
        pad = (pad * (len(plaintext) // len(pad) + 1))[:len(plaintext)]
        return bytes(a ^ b for a, b in zip(plaintext, pad))

    decrypt = encrypt


class ChatClient:
    def __init__(self, cid: int, server_addr, messages: list[bytes], pause: float, initiator: bool):
        self.cid = cid
        self.server_addr = server_addr
        self.messages = messages
        self.pause = pause
        self.initiator = initiator
        self.tee = TrustedModule(b"room-secret")
        self.received = 0
        self.error: BaseException | None = None

    # the hookable surface
    def tee_call(self, op: str, data: bytes) -> bytes:
        return getattr(self.tee, op)(data)

    def net_send(self, line: bytes) -> None:
        self._sock.sendall(line)

    def net_recv(self, line: bytes) -> None:
        self.received += 1
        parts = line.split(b" ", 2)
        if parts[0] == b"MSG":
            self.tee_call("decrypt", bytes.fromhex(parts[2].strip().decode()))

    def run(self):
        try:
            self._sock = socket.create_connection(self.server_addr)
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            reader = threading.Thread(target=self._read, daemon=True)
            reader.start()
            self.net_send(f"HELLO {self.cid}\n".encode())
            if not self.initiator:
                time.sleep(self.pause)
            verb = "CREATE" if self.initiator else "JOIN"
            self.net_send(f"{verb} {ROOM}\n".encode())
            self.tee_call("derive_key", ROOM.encode())
            for msg in self.messages:
                time.sleep(self.pause)
                ct = self.tee_call("encrypt", msg)
                self.net_send(b"MSG %d " % self.cid + ct.hex().encode() + b"\n")
            time.sleep(self.pause)
            self.net_send(b"BYE\n")
            self._sock.shutdown(socket.SHUT_WR)
            reader.join(timeout=5)
            self._sock.close()
        except BaseException as exc:  # reported by the scenario runner
            self.error = exc

    def _read(self):
        with self._sock.makefile("rb") as fh:
            for line in fh:
                self.net_recv(line)


def instrument(client: ChatClient, bridge: BridgeClient) -> None:
    """Hook the client's trusted calls and socket I/O so each call streams one event."""
    channel_for = {"derive_key": "keyex", "encrypt": "session", "decrypt": "session"}
    tee_call, net_send, net_recv = client.tee_call, client.net_send, client.net_recv

    def hooked_tee_call(op, data):
        out = tee_call(op, data)
        bridge.emit("ra_tee", channel_for[op], "in" if op == "decrypt" else "out", out)
        return out

    def hooked_send(line):
        bridge.emit("ra_ree", "send", "out", line)
        net_send(line)

    def hooked_recv(line):
        bridge.emit("ra_ree", "recv", "in", line)
        net_recv(line)

    client.tee_call = hooked_tee_call  # type: ignore[method-assign]
    client.net_send = hooked_send  # type: ignore[method-assign]
    client.net_recv = hooked_recv  # type: ignore[method-assign]


@dataclass
class ScenarioResult:
    scenario: str
    seconds: float
    messages_received: int
    instrumented: bool


def script(cid: int, n: int) -> list[bytes]:
    return [f"client {cid} says hello #{i}".encode() for i in range(n)]


def run_scenario(scenario: str = "A", *, messages: int = 10, pause: float = 0.05,
                 endpoint: str | None = None) -> ScenarioResult:
    """Run one scripted session; instrument participant 1 when ``endpoint`` is given."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    relay = _Relay()
    threading.Thread(target=relay.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True).start()
    bridge = BridgeClient(endpoint) if endpoint else None
    try:
        start = time.perf_counter()
        clients = []
        for cid in (1, 2, 3):
            initiator = (cid == 1) if scenario == "A" else (cid == 2)
            c = ChatClient(cid, relay.server_address, script(cid, messages), pause, initiator)
            if cid == 1 and bridge is not None:
                instrument(c, bridge)
            clients.append(c)
        threads = [threading.Thread(target=c.run) for c in clients]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        elapsed = time.perf_counter() - start
    finally:
        if bridge is not None:
            bridge.close()
        relay.shutdown()
        relay.server_close()
    for c in clients:
        if c.error is not None:
            raise RuntimeError(f"client {c.cid} aborted: {c.error!r}") from c.error
    return ScenarioResult(scenario, elapsed, clients[0].received, bridge is not None)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", choices=SCENARIOS, default="A")
    ap.add_argument("--messages", type=int, default=10)
    ap.add_argument("--pause", type=float, default=0.05)
    args = ap.parse_args(argv)
    res = run_scenario(args.scenario, messages=args.messages, pause=args.pause,
                       endpoint=os.environ.get(ENDPOINT_ENV))
    mode = "instrumented" if res.instrumented else "plain"
    print(f"scenario {res.scenario} ({mode}): {res.seconds:.3f} s, client 1 received {res.messages_received} lines")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
