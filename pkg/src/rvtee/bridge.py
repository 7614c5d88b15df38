"""Out-of-process event ingestion.

Instrumented applications connect over a stream socket and send one JSON
object per line::

    {"seq":1,"ts":0,"boundary":"ra_ree","channel":"send","dir":"out","payload_b64":""}

Each line is sealed into the event log before it may touch monitor state.
Commands (``pause``, ``resume``, ``flag``) travel back on the same
connection, also one JSON object per line.
"""

from __future__ import annotations

import base64
import binascii
import enum
import json
import logging
import os
import socket
import socketserver
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import BinaryIO, Callable, Sequence

from .errors import MalformedEvent, OutOfOrderEvent, OversizeLine, RVTeeError
from .rvmon import Boundary, Direction, Event, Monitor, PropertyAutomaton, VerdictKind

logger = logging.getLogger(__name__)

MAX_LINE = 1 << 20
ENDPOINT_ENV = "RVTEE_BRIDGE_ENDPOINT"
DEFAULT_ENDPOINT = "127.0.0.1:7878"

_WIRE_KEYS = ("seq", "ts", "boundary", "channel", "dir", "payload_b64")


def _strip_newline(line: bytes) -> bytes:
    if line.endswith(b"\r\n"):
        return line[:-2]
    if line.endswith(b"\n"):
        return line[:-1]
    return line


def _load_object(line: bytes, what: str) -> dict:
    body = _strip_newline(bytes(line))
    if len(body) > MAX_LINE:
        raise OversizeLine(f"{what} line of {len(body)} octets exceeds {MAX_LINE}")
    try:
        obj = json.loads(body)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedEvent(f"{what} is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise MalformedEvent(f"{what} must be a JSON object")
    return obj


def _int_field(obj: dict, key: str) -> int:
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise MalformedEvent(f"{key!r} must be a non-negative integer")
    return value


def decode_wire(line: bytes) -> Event:
    obj = _load_object(line, "event")
    missing = [k for k in _WIRE_KEYS if k not in obj]
    if missing:
        raise MalformedEvent(f"missing keys: {', '.join(missing)}")
    extra = sorted(set(obj) - set(_WIRE_KEYS))
    if extra:
        raise MalformedEvent(f"unexpected keys: {', '.join(extra)}")
    seq = _int_field(obj, "seq")
    ts = _int_field(obj, "ts")
    try:
        boundary = Boundary(obj["boundary"])
    except (ValueError, TypeError):
        raise MalformedEvent(f"bad boundary {obj['boundary']!r}") from None
    try:
        direction = Direction(obj["dir"])
    except (ValueError, TypeError):
        raise MalformedEvent(f"bad dir {obj['dir']!r}") from None
    channel = obj["channel"]
    if not isinstance(channel, str) or not channel:
        raise MalformedEvent("channel must be a non-empty string")
    if not isinstance(obj["payload_b64"], str):
        raise MalformedEvent("payload_b64 must be a string")
    try:
        payload = base64.b64decode(obj["payload_b64"], validate=True)
    except (binascii.Error, ValueError):
        raise MalformedEvent("payload_b64 is not valid base64") from None
    return Event(seq, ts, boundary, channel, direction, payload)


def encode_wire(event: Event) -> bytes:
    obj = {
        "seq": event.seq,
        "ts": event.timestamp,
        "boundary": Boundary(event.boundary).value,
        "channel": event.channel,
        "dir": Direction(event.direction).value,
        "payload_b64": base64.b64encode(event.payload).decode("ascii"),
    }
    return json.dumps(obj, separators=(",", ":")).encode() + b"\n"


class CommandKind(str, enum.Enum):
    PAUSE = "pause"
    RESUME = "resume"
    FLAG = "flag"


@dataclass(frozen=True)
class Command:
    kind: CommandKind
    property_id: str | None = None
    seq: int | None = None

    def encode(self) -> bytes:
        obj: dict = {"cmd": self.kind.value}
        if self.property_id is not None:
            obj["property_id"] = self.property_id
        if self.seq is not None:
            obj["seq"] = self.seq
        return json.dumps(obj, separators=(",", ":")).encode() + b"\n"

    @classmethod
    def decode(cls, line: bytes) -> Command:
        obj = _load_object(line, "command")
        try:
            kind = CommandKind(obj.get("cmd"))
        except ValueError:
            raise MalformedEvent(f"unknown command {obj.get('cmd')!r}") from None
        if kind is CommandKind.FLAG and not isinstance(obj.get("property_id"), str):
            raise MalformedEvent("flag command needs a property_id")
        return cls(kind, obj.get("property_id"), obj.get("seq"))


@dataclass
class SessionSummary:
    events: int = 0
    sealed: int = 0
    verdicts: int = 0
    violations: int = 0
    taint_matches: int = 0
    rejects: int = 0
    commands: int = 0
    seq_gaps: list[tuple[int, int]] = field(default_factory=list)
    fatal: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _read_lines(rfile: BinaryIO):
    """Yield raw lines; oversize lines are drained and yielded as :class:`OversizeLine`."""
    while True:
        line = rfile.readline(MAX_LINE + 2)
        if not line:
            return
        if not line.endswith(b"\n") and len(line) > MAX_LINE:
            dropped = len(line)
            while True:
                more = rfile.readline(MAX_LINE)
                dropped += len(more)
                if not more or more.endswith(b"\n"):
                    break
            yield OversizeLine(f"line of at least {dropped} octets exceeds {MAX_LINE}")
            continue
        yield line


def run_session(rfile: BinaryIO, wfile: BinaryIO | None, monitor: Monitor, scanner, store,
                event_log_id: int) -> SessionSummary:
    """Serve one connection until EOF or a fatal sealing error."""
    summary = SessionSummary()
    expected_seq: int | None = None

    def emit(cmd: Command):
        summary.commands += 1
        if wfile is not None:
            try:
                wfile.write(cmd.encode())
                wfile.flush()
            except OSError:
                logger.warning("could not deliver %s command", cmd.kind.value)

    try:
        for line in _read_lines(rfile):
            if isinstance(line, OversizeLine):
                summary.rejects += 1
                logger.warning("rejected: %s", line)
                continue
            if not line.endswith(b"\n"):
                summary.rejects += 1
                logger.warning("rejected unterminated trailing line")
                continue
            try:
                event = decode_wire(line)
            except MalformedEvent as exc:
                summary.rejects += 1
                logger.warning("rejected malformed event: %s", exc)
                continue
            summary.events += 1

            try:
                store.append_sealed(event_log_id, line)
            except RVTeeError as exc:
                summary.fatal = f"{type(exc).__name__}: {exc}"
                logger.error("sealing failed, stopping session: %s", exc)
                break
            summary.sealed += 1

            if expected_seq is not None and event.seq > expected_seq:
                summary.seq_gaps.append((expected_seq, event.seq))
            try:
                verdicts = monitor.process(event)
            except OutOfOrderEvent as exc:
                summary.rejects += 1
                logger.warning("%s", exc)
                continue
            except RVTeeError as exc:
                summary.fatal = f"{type(exc).__name__}: {exc}"
                logger.error("sealing verdicts failed, stopping session: %s", exc)
                break
            expected_seq = event.seq + 1

            summary.verdicts += len(verdicts)
            for v in verdicts:
                if v.kind is VerdictKind.VIOLATION:
                    summary.violations += 1
                    emit(Command(CommandKind.FLAG, v.property_id, v.event_seq))

            if scanner is not None and event.direction is Direction.OUT and event.payload:
                for match in scanner.scan(event.payload):
                    summary.taint_matches += 1
                    emit(Command(CommandKind.FLAG, f"taint:{match.pattern_id}", event.seq))
    except (ConnectionError, OSError) as exc:
        logger.info("connection closed: %s", exc)
    return summary


# --- sockets --------------------------------------------------------------------

def parse_endpoint(text: str) -> tuple[int, object]:
    """``host:port`` for TCP; ``unix:/path`` or any path containing ``/`` for a local socket."""
    if text.startswith("unix:"):
        return socket.AF_UNIX, text[5:]
    if "/" in text:
        return socket.AF_UNIX, text
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint {text!r} is neither host:port nor a socket path")
    return socket.AF_INET, (host or "127.0.0.1", int(port))


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        bridge: BridgeServer = self.server.bridge  # type: ignore[attr-defined]
        monitor = Monitor(bridge.automata, bridge.store, bridge.verdict_log_id)
        summary = run_session(self.rfile, self.wfile, monitor, bridge.scanner, bridge.store,
                              bridge.event_log_id)
        bridge._finished(summary)


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class _UnixServer(socketserver.ThreadingUnixStreamServer):
    daemon_threads = True


class BridgeServer:
    """Listens on an endpoint and runs one session (with its own monitor) per connection."""

    def __init__(self, endpoint: str, automata: Sequence[PropertyAutomaton], store, *,
                 event_log_id: int, verdict_log_id: int, scanner=None,
                 on_summary: Callable[[SessionSummary], None] | None = None):
        self.automata = list(automata)
        self.store = store
        self.scanner = scanner
        self.event_log_id = event_log_id
        self.verdict_log_id = verdict_log_id
        self.summaries: list[SessionSummary] = []
        self.fatal: str | None = None
        self._on_summary = on_summary
        self._lock = threading.Lock()
        self._done = threading.Condition(self._lock)
        self._serving = False
        family, address = parse_endpoint(endpoint)
        if family == socket.AF_UNIX:
            if os.path.exists(address):
                os.unlink(address)
            self._server = _UnixServer(address, _Handler)
        else:
            self._server = _TCPServer(address, _Handler)
        self._server.bridge = self  # type: ignore[attr-defined]

    @property
    def endpoint(self) -> str:
        addr = self._server.server_address
        if isinstance(addr, tuple):
            return f"{addr[0]}:{addr[1]}"
        return f"unix:{addr}"

    def _finished(self, summary: SessionSummary) -> None:
        with self._done:
            self.summaries.append(summary)
            if summary.fatal and "KeyExhausted" in summary.fatal:
                self.fatal = summary.fatal
            self._done.notify_all()
        if self._on_summary:
            self._on_summary(summary)
        if self.fatal and self._serving:
            threading.Thread(target=self._server.shutdown, daemon=True).start()

    def wait_sessions(self, count: int, timeout: float | None = None) -> bool:
        with self._done:
            return self._done.wait_for(lambda: len(self.summaries) >= count, timeout)

    def serve_forever(self) -> None:
        self._serving = True
        try:
            self._server.serve_forever(poll_interval=0.1)
        finally:
            self._serving = False

    def handle_one(self) -> SessionSummary:
        """Accept a single connection and return its summary once it ends."""
        before = len(self.summaries)
        self._server.handle_request()
        self.wait_sessions(before + 1)
        return self.summaries[before]

    def start(self) -> threading.Thread:
        self._serving = True
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t

    def close(self) -> None:
        if self._serving:
            # shutdown() blocks until a running serve_forever loop notices
            self._server.shutdown()
        self._server.server_close()
        addr = self._server.server_address
        if isinstance(addr, str) and os.path.exists(addr):
            os.unlink(addr)


class BridgeClient:
    """Client side used by instrumented applications."""

    def __init__(self, endpoint: str | None = None):
        endpoint = endpoint or os.environ.get(ENDPOINT_ENV, DEFAULT_ENDPOINT)
        family, address = parse_endpoint(endpoint)
        self._sock = socket.socket(family, socket.SOCK_STREAM)
        self._sock.connect(address)
        if family == socket.AF_INET:
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._wfile = self._sock.makefile("wb")
        self._rfile = self._sock.makefile("rb")
        self.commands: list[Command] = []
        self._seq = 0
        self._lock = threading.Lock()
        self._reader = threading.Thread(target=self._read_commands, daemon=True)
        self._reader.start()

    def _read_commands(self):
        for line in self._rfile:
            try:
                self.commands.append(Command.decode(line))
            except MalformedEvent:
                logger.warning("ignoring malformed command line")

    def send(self, event: Event) -> None:
        with self._lock:
            self._wfile.write(encode_wire(event))
            self._wfile.flush()

    def emit(self, boundary, channel: str, direction, payload: bytes = b"") -> Event:
        """Build the next event in sequence and send it."""
        with self._lock:
            self._seq += 1
            event = Event(self._seq, time.time_ns(), Boundary(boundary), channel, Direction(direction), payload)
            self._wfile.write(encode_wire(event))
            self._wfile.flush()
        return event

    def close(self) -> None:
        try:
            self._wfile.flush()
            self._sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass
        self._reader.join(timeout=10)
        self._wfile.close()
        self._rfile.close()
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
