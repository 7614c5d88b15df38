import base64
import io
import json
import threading

import pytest
from hypothesis import given, settings, strategies as st

from rvtee.bridge import (MAX_LINE, BridgeClient, BridgeServer, Command, CommandKind, decode_wire, encode_wire,
                          parse_endpoint, run_session)
from rvtee.errors import MalformedEvent, OversizeLine, StorageFailure
from rvtee.fixtures import HANDSHAKE, KEY_EGRESS, fixture_text
from rvtee.rvmon import Boundary, Direction, Event, Monitor, Verdict, VerdictKind, load_spec, step
from rvtee.seallog import iter_records
from rvtee.taint import SensitivePattern, TaintScanner
from rvtee.verifier import verify

from conftest import make_store

EVENTS, VERDICTS = 1, 2
KEYS = ("seq", "ts", "boundary", "channel", "dir", "payload_b64")


def wire(seq, boundary="ra_ree", channel="send", direction="out", payload=b"", ts=0):
    return json.dumps({"seq": seq, "ts": ts, "boundary": boundary, "channel": channel, "dir": direction,
                       "payload_b64": base64.b64encode(payload).decode()}).encode() + b"\n"


def session(tmp_path, lines, *, props=KEY_EGRESS, scanner=None, key_length=32 * 1024):
    store, hsm, safe, logs = make_store(tmp_path, log_ids=(EVENTS, VERDICTS), key_length=key_length)
    monitor = Monitor(load_spec(fixture_text(props)), store, verdict_log_id=VERDICTS)
    out = io.BytesIO()
    summary = run_session(io.BytesIO(b"".join(lines)), out, monitor, scanner, store, EVENTS)
    commands = [Command.decode(l) for l in out.getvalue().splitlines(keepends=True)]
    return summary, commands, store, monitor, (hsm, safe, logs)


def test_decode_example():
    e = decode_wire(b'{"seq":1,"ts":0,"boundary":"ra_ree","channel":"send","dir":"out","payload_b64":""}\n')
    assert e == Event(1, 0, Boundary.RA_REE, "send", Direction.OUT, b"")


@pytest.mark.parametrize("mutation", [
    lambda o: o.pop("seq"),
    lambda o: o.update(extra=1),
    lambda o: o.update(seq="1"),
    lambda o: o.update(seq=True),
    lambda o: o.update(seq=-1),
    lambda o: o.update(boundary="kernel"),
    lambda o: o.update(dir="up"),
    lambda o: o.update(channel=""),
    lambda o: o.update(payload_b64="!!!"),
    lambda o: o.update(payload_b64=5),
])
def test_decode_rejects(mutation):
    obj = json.loads(wire(1, payload=b"hi"))
    mutation(obj)
    with pytest.raises(MalformedEvent):
        decode_wire(json.dumps(obj).encode() + b"\n")


def test_decode_rejects_non_objects():
    for raw in (b"[1,2]\n", b"not json\n", b"\xff\xfe\n"):
        with pytest.raises(MalformedEvent):
            decode_wire(raw)


def test_oversize_line():
    with pytest.raises(OversizeLine):
        decode_wire(b" " * (MAX_LINE + 1) + b"\n")


def canonical(obj: dict) -> bytes:
    return json.dumps({k: obj[k] for k in KEYS}, separators=(",", ":")).encode() + b"\n"


wire_objects = st.fixed_dictionaries({
    "seq": st.integers(0, 2**63), "ts": st.integers(0, 2**63),
    "boundary": st.sampled_from(["ra_tee", "ra_ree"]),
    "channel": st.text(min_size=1, max_size=20), "dir": st.sampled_from(["in", "out"]),
    "payload_b64": st.binary(max_size=64).map(lambda b: base64.b64encode(b).decode()),
})


@given(wire_objects, st.randoms(use_true_random=False), st.booleans())
@settings(max_examples=10_000, deadline=None)
def test_wire_roundtrip_is_canonical(obj, rnd, spaced):
    keys = list(obj)
    rnd.shuffle(keys)
    raw = json.dumps({k: obj[k] for k in keys}, separators=(", ", ": ") if spaced else (",", ":"))
    assert encode_wire(decode_wire(raw.encode() + b"\n")) == canonical(obj)


def test_command_encoding():
    c = Command(CommandKind.FLAG, "p", 50)
    assert c.encode() == b'{"cmd":"flag","property_id":"p","seq":50}\n'
    assert Command.decode(c.encode()) == c
    assert Command.decode(b'{"cmd":"pause"}\n') == Command(CommandKind.PAUSE)
    with pytest.raises(MalformedEvent):
        Command.decode(b'{"cmd":"flag"}\n')
    with pytest.raises(MalformedEvent):
        Command.decode(b'{"cmd":"reboot"}\n')


def test_empty_session(tmp_path):
    summary, commands, store, *_ = session(tmp_path, [])
    assert summary.to_dict() == {"events": 0, "sealed": 0, "verdicts": 0, "violations": 0, "taint_matches": 0,
                                 "rejects": 0, "commands": 0, "seq_gaps": [], "fatal": None}
    assert commands == [] and store.record_count == 0


def test_benign_events_are_sealed(tmp_path):
    lines = [wire(i, payload=b"hello %d" % i) for i in range(1, 101)]
    summary, commands, store, _, (hsm, safe, logs) = session(tmp_path, lines)
    assert summary.events == summary.sealed == 100
    assert summary.verdicts == 0 and commands == []
    assert len(list(iter_records(store.seal_log))) == 100
    assert logs[EVENTS].read_bytes() == b"".join(lines)
    assert verify(logs, store.seal_log, safe, hsm.attested_key_offset()).passed


def test_violation_at_seq_50_flags_once(tmp_path):
    (auto,) = load_spec(fixture_text(KEY_EGRESS))
    lines = []
    for seq in range(1, 101):
        if seq == 10:
            lines.append(wire(seq, "ra_tee", "get_key", "in"))
        elif seq == 50:
            lines.append(wire(seq, payload=b"here is the KEY"))
        else:
            lines.append(wire(seq, payload=b"benign"))
    # oracle: fold step() over the decoded events
    state, expected = auto.initial, []
    for l in lines:
        state, v = step(auto, state, decode_wire(l))
        if v:
            expected.append(v)
    assert expected == [Verdict("no_key_egress", 50, VerdictKind.VIOLATION)]
    summary, commands, store, monitor, (hsm, safe, logs) = session(tmp_path, lines)
    assert summary.violations == 1 and summary.verdicts == 1
    assert commands == [Command(CommandKind.FLAG, "no_key_egress", 50)]
    assert [Verdict.parse(l) for l in logs[VERDICTS].read_bytes().splitlines()] == expected
    assert store.record_count == 101


def test_rejects_and_gaps(tmp_path):
    lines = [wire(1), b"garbage\n", wire(2), wire(2), wire(5), wire(6)[:-1]]
    summary, *_ = session(tmp_path, lines)
    assert summary.events == 4 and summary.sealed == 4
    assert summary.rejects == 3  # garbage, duplicate seq, unterminated tail
    assert summary.seq_gaps == [(3, 5)]


def test_oversize_line_is_drained(tmp_path):
    big = b"x" * (MAX_LINE + 10) + b"\n"
    summary, *_ = session(tmp_path, [wire(1), big, wire(2)])
    assert summary.rejects == 1 and summary.events == 2


def test_taint_flags_outbound_only(tmp_path):
    scanner = TaintScanner([SensitivePattern("room", b"room-secret")])
    lines = [wire(1, payload=b"leaking room-secrat now"), wire(2, direction="in", payload=b"room-secret"),
             wire(3, payload=b"nothing to see")]
    summary, commands, *_ = session(tmp_path, lines, scanner=scanner)
    assert summary.taint_matches == 1
    assert commands == [Command(CommandKind.FLAG, "taint:room", 1)]


def test_seal_before_process(tmp_path):
    store, *_ = make_store(tmp_path, log_ids=(EVENTS, VERDICTS))
    monitor = Monitor(load_spec(fixture_text(HANDSHAKE)), store, verdict_log_id=VERDICTS)
    real = store.append_sealed
    calls = {"n": 0}

    def failing(log_id, data):
        calls["n"] += 1
        if calls["n"] == 2:
            raise StorageFailure("injected")
        return real(log_id, data)
    store.append_sealed = failing
    lines = [wire(1, "ra_tee", "keyex", "out"), wire(2, "ra_tee", "keyex", "out"), wire(3)]
    summary = run_session(io.BytesIO(b"".join(lines)), None, monitor, None, store, EVENTS)
    assert summary.fatal and "StorageFailure" in summary.fatal
    assert summary.sealed == 1 and summary.events == 2
    # event 2 would have violated the handshake; it never reached the monitor
    assert monitor.states == {"handshake_order": "keyex"} and monitor.last_seq == 1


def test_exhaustion_is_fatal(tmp_path):
    summary, *_ = session(tmp_path, [wire(i) for i in range(1, 6)], key_length=3 * 32)
    assert summary.sealed == 3 and summary.fatal.startswith("KeyExhausted")


def test_parse_endpoint():
    import socket
    assert parse_endpoint("127.0.0.1:7878") == (socket.AF_INET, ("127.0.0.1", 7878))
    assert parse_endpoint(":9") == (socket.AF_INET, ("127.0.0.1", 9))
    assert parse_endpoint("unix:/tmp/x.sock") == (socket.AF_UNIX, "/tmp/x.sock")
    assert parse_endpoint("/run/rv.sock") == (socket.AF_UNIX, "/run/rv.sock")
    with pytest.raises(ValueError):
        parse_endpoint("nonsense")


@pytest.mark.parametrize("kind", ["tcp", "unix"])
def test_server_and_client(tmp_path, kind):
    store, hsm, safe, logs = make_store(tmp_path, log_ids=(EVENTS, VERDICTS))
    endpoint = "127.0.0.1:0" if kind == "tcp" else f"unix:{tmp_path / 'bridge.sock'}"
    server = BridgeServer(endpoint, load_spec(fixture_text(HANDSHAKE)), store,
                          event_log_id=EVENTS, verdict_log_id=VERDICTS)
    server.start()
    try:
        with BridgeClient(server.endpoint) as client:
            client.emit("ra_tee", "session", "out", b"too early")
            client.emit("ra_ree", "send", "out", b"x")
        assert server.wait_sessions(1, timeout=10)
    finally:
        server.close()
    (summary,) = server.summaries
    assert summary.events == 2 and summary.violations == 1
    assert client.commands == [Command(CommandKind.FLAG, "handshake_order", 1)]
    assert verify(logs, store.seal_log, safe, hsm.attested_key_offset()).passed


def test_sessions_get_independent_monitors(tmp_path):
    store, *_ = make_store(tmp_path, log_ids=(EVENTS, VERDICTS))
    server = BridgeServer("127.0.0.1:0", load_spec(fixture_text(HANDSHAKE)), store,
                          event_log_id=EVENTS, verdict_log_id=VERDICTS)
    server.start()
    try:
        clients = [BridgeClient(server.endpoint) for _ in range(3)]
        threads = [threading.Thread(target=lambda c=c: (c.emit("ra_tee", "keyex", "out"),
                                                        c.emit("ra_tee", "session", "out"), c.close()))
                   for c in clients]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert server.wait_sessions(3, timeout=10)
    finally:
        server.close()
    assert [s.violations for s in server.summaries] == [0, 0, 0]
    assert store.record_count == 6


def test_client_uses_environment(monkeypatch, tmp_path):
    store, *_ = make_store(tmp_path, log_ids=(EVENTS, VERDICTS))
    server = BridgeServer("127.0.0.1:0", [], store, event_log_id=EVENTS, verdict_log_id=VERDICTS)
    server.start()
    monkeypatch.setenv("RVTEE_BRIDGE_ENDPOINT", server.endpoint)
    try:
        with BridgeClient() as c:
            c.emit("ra_ree", "send", "out", b"ping")
        assert server.wait_sessions(1, timeout=10)
    finally:
        server.close()
    assert server.summaries[0].sealed == 1
