"""Property automata over boundary events, and the monitor that folds events through them.

Property documents are plain text::

    # comments start with '#'
    property handshake_order
    states: init keyex established violated
    initial: init
    violation: violated
    init -> keyex on ra_tee/keyex/out
    init -> violated on ra_tee/session/out payload ~ ^DATA

A guard is ``<boundary>/<channel>/<direction>``; any part may be ``*``.  The
channel itself may contain ``/``.  The optional ``payload ~ <regex>`` clause
is searched against the raw payload octets.
"""

from __future__ import annotations

import enum
import re
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import KeyExhausted, OutOfOrderEvent, ParseError, SemanticError, SemanticWarning


class Boundary(str, enum.Enum):
    RA_TEE = "ra_tee"
    RA_REE = "ra_ree"


class Direction(str, enum.Enum):
    IN = "in"
    OUT = "out"


@dataclass(frozen=True)
class Event:
    seq: int
    timestamp: int
    boundary: Boundary
    channel: str
    direction: Direction
    payload: bytes = b""


@dataclass(frozen=True)
class Guard:
    boundary: Boundary | None = None
    channel: str | None = None
    direction: Direction | None = None
    payload: re.Pattern | None = None

    def matches(self, event: Event) -> bool:
        return ((self.boundary is None or event.boundary == self.boundary)
                and (self.channel is None or event.channel == self.channel)
                and (self.direction is None or event.direction == self.direction)
                and (self.payload is None or self.payload.search(event.payload) is not None))


@dataclass(frozen=True)
class Transition:
    source: str
    target: str
    guard: Guard


@dataclass(frozen=True)
class PropertyAutomaton:
    id: str
    states: tuple[str, ...]
    initial: str
    transitions: tuple[Transition, ...]
    violation_states: frozenset[str] = frozenset()
    warnings: tuple[str, ...] = ()


class VerdictKind(str, enum.Enum):
    VIOLATION = "Violation"
    RECOVERED = "Recovered"
    HEARTBEAT = "Heartbeat"


@dataclass(frozen=True)
class Verdict:
    property_id: str
    event_seq: int
    kind: VerdictKind

    def serialize(self) -> bytes:
        return f"{self.property_id}\t{self.event_seq}\t{self.kind.value}\n".encode()

    @classmethod
    def parse(cls, line: bytes | str) -> Verdict:
        if isinstance(line, bytes):
            line = line.decode()
        prop, seq, kind = line.rstrip("\n").split("\t")
        return cls(prop, int(seq), VerdictKind(kind))


def step(automaton: PropertyAutomaton, state: str, event: Event) -> tuple[str, Verdict | None]:
    """Take the first transition out of ``state`` whose guard matches; self-loop otherwise."""
    nxt = state
    for t in automaton.transitions:
        if t.source == state and t.guard.matches(event):
            nxt = t.target
            break
    was_bad = state in automaton.violation_states
    is_bad = nxt in automaton.violation_states
    if is_bad and not was_bad:
        return nxt, Verdict(automaton.id, event.seq, VerdictKind.VIOLATION)
    if was_bad and not is_bad:
        return nxt, Verdict(automaton.id, event.seq, VerdictKind.RECOVERED)
    return nxt, None


# --- property documents -----------------------------------------------------

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_.:-]*$")
_TRANSITION = re.compile(r"(?P<src>\S+)\s*->\s*(?P<dst>\S+)\s+on\s+(?P<guard>\S+)(?P<rest>.*)$")
_PAYLOAD = re.compile(r"\s*\[?\s*payload\s*~\s*(?P<regex>.+?)\s*(?P<close>\])?\s*$")


@dataclass
class _Draft:
    id: str
    line: int
    states: list[str] | None = None
    states_line: int = 0
    initial: tuple[str, int] | None = None
    violation: list[tuple[str, int]] = field(default_factory=list)
    transitions: list[tuple[str, str, Guard, int]] = field(default_factory=list)


def _parse_guard(text: str, lineno: int, col: int) -> Guard:
    parts = text.split("/")
    if len(parts) < 3:
        raise ParseError(f"guard {text!r} must be <boundary>/<channel>/<direction>", lineno, col)
    b, d = parts[0], parts[-1]
    channel = "/".join(parts[1:-1])
    try:
        boundary = None if b == "*" else Boundary(b)
    except ValueError:
        raise ParseError(f"unknown boundary {b!r} (expected ra_tee, ra_ree or *)", lineno, col) from None
    try:
        direction = None if d == "*" else Direction(d)
    except ValueError:
        raise ParseError(f"unknown direction {d!r} (expected in, out or *)", lineno,
                         col + len(text) - len(d)) from None
    if not channel:
        raise ParseError("empty channel", lineno, col + len(b) + 1)
    return Guard(boundary, None if channel == "*" else channel, direction)


def _parse_line(draft: _Draft | None, raw: str, lineno: int, drafts: list[_Draft]) -> _Draft | None:
    line = raw.split("#", 1)[0].rstrip() if not re.search(r"payload\s*~", raw) else raw.rstrip()
    stripped = line.strip()
    if not stripped:
        return draft
    col = len(line) - len(line.lstrip()) + 1

    if stripped.startswith("property"):
        words = stripped.split()
        if words[0] == "property":
            if len(words) != 2 or not _IDENT.match(words[1]):
                raise ParseError("expected 'property <id>'", lineno, col)
            if any(d.id == words[1] for d in drafts):
                raise SemanticError(f"duplicate property id {words[1]!r}", lineno)
            new = _Draft(words[1], lineno)
            drafts.append(new)
            return new

    if draft is None:
        raise ParseError("statement outside of a property block", lineno, col)

    key, sep, value = stripped.partition(":")
    if sep and key.strip() in ("states", "initial", "violation") and "->" not in key:
        names = value.split()
        for name in names:
            if not _IDENT.match(name):
                raise ParseError(f"bad state name {name!r}", lineno, line.index(name) + 1)
        key = key.strip()
        if key == "states":
            if draft.states is not None:
                raise SemanticError("states declared twice", lineno)
            if not names:
                raise ParseError("at least one state is required", lineno, col)
            if len(set(names)) != len(names):
                raise SemanticError("duplicate state name", lineno)
            draft.states, draft.states_line = names, lineno
        elif key == "initial":
            if len(names) != 1:
                raise ParseError("expected exactly one initial state", lineno, col)
            draft.initial = (names[0], lineno)
        else:
            draft.violation.extend((n, lineno) for n in names)
        return draft

    m = _TRANSITION.match(stripped)
    if not m:
        raise ParseError("expected a declaration or '<from> -> <to> on <guard>'", lineno, col)
    guard = _parse_guard(m.group("guard"), lineno, col + m.start("guard"))
    rest = m.group("rest")
    if rest.strip():
        pm = _PAYLOAD.match(rest)
        if not pm:
            raise ParseError("trailing text after guard (expected 'payload ~ <regex>')", lineno,
                             col + m.start("rest") + len(rest) - len(rest.lstrip()))
        regex = pm.group("regex")
        try:
            compiled = re.compile(regex.encode())
        except re.error as exc:
            raise ParseError(f"bad payload regex: {exc}", lineno, col + m.start("rest") + pm.start("regex")) from None
        guard = Guard(guard.boundary, guard.channel, guard.direction, compiled)
    draft.transitions.append((m.group("src"), m.group("dst"), guard, lineno))
    return draft


def _finish(draft: _Draft) -> PropertyAutomaton:
    if draft.states is None:
        raise SemanticError(f"property {draft.id!r} declares no states", draft.line)
    declared = set(draft.states)
    if draft.initial is None:
        raise SemanticError(f"property {draft.id!r} has no initial state", draft.line)

    def need(name: str, lineno: int):
        if name not in declared:
            raise SemanticError(f"undeclared state {name!r} in property {draft.id!r}", lineno)

    need(*draft.initial)
    for name, lineno in draft.violation:
        need(name, lineno)
    for src, dst, _, lineno in draft.transitions:
        need(src, lineno)
        need(dst, lineno)

    # reachability from the initial state; unreachable violation states only warn
    adjacency: dict[str, set[str]] = {}
    for src, dst, _, _ in draft.transitions:
        adjacency.setdefault(src, set()).add(dst)
    seen = {draft.initial[0]}
    queue = deque(seen)
    while queue:
        for nxt in adjacency.get(queue.popleft(), ()):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    notes = []
    for name, _ in draft.violation:
        if name not in seen:
            notes.append(f"property {draft.id!r}: violation state {name!r} is unreachable")
            warnings.warn(notes[-1], SemanticWarning, stacklevel=4)

    return PropertyAutomaton(
        id=draft.id,
        states=tuple(draft.states),
        initial=draft.initial[0],
        transitions=tuple(Transition(s, d, g) for s, d, g, _ in draft.transitions),
        violation_states=frozenset(n for n, _ in draft.violation),
        warnings=tuple(notes),
    )


def load_spec(text: str) -> list[PropertyAutomaton]:
    drafts: list[_Draft] = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        current = _parse_line(current, raw, lineno, drafts)
    return [_finish(d) for d in drafts]


def load_spec_files(paths: Iterable) -> list[PropertyAutomaton]:
    automata: list[PropertyAutomaton] = []
    for p in paths:
        automata.extend(load_spec(Path(p).read_text()))
    ids = [a.id for a in automata]
    if len(set(ids)) != len(ids):
        raise SemanticError("the same property id is defined in more than one file")
    return automata


# --- monitor ------------------------------------------------------------------

class Monitor:
    """Deterministic fold of one ordered event stream through a set of automata.

    When a seal store is attached, every verdict is appended to the verdict
    log before :meth:`process` returns.
    """

    def __init__(self, automata: Sequence[PropertyAutomaton], store=None, verdict_log_id: int | None = None):
        if store is not None and verdict_log_id is None:
            raise ValueError("verdict_log_id is required when a seal store is attached")
        self.automata = list(automata)
        self.store = store
        self.verdict_log_id = verdict_log_id
        self.states = {a.id: a.initial for a in self.automata}
        self.last_seq: int | None = None
        self.processed = 0
        self.rejected = 0
        self.halted = False

    def process(self, event: Event) -> list[Verdict]:
        if self.halted:
            raise KeyExhausted("monitor halted after the keystream ran out")
        if self.last_seq is not None and event.seq <= self.last_seq:
            self.rejected += 1
            raise OutOfOrderEvent(f"event seq {event.seq} does not follow {self.last_seq}")

        new_states = dict(self.states)
        verdicts = []
        for a in self.automata:
            new_states[a.id], verdict = step(a, self.states[a.id], event)
            if verdict is not None:
                verdicts.append(verdict)
        self._seal(verdicts)
        self.states = new_states
        self.last_seq = event.seq
        self.processed += 1
        return verdicts

    def heartbeat(self) -> list[Verdict]:
        """Emit (and seal) one liveness verdict per property at the last processed seq."""
        seq = -1 if self.last_seq is None else self.last_seq
        verdicts = [Verdict(a.id, seq, VerdictKind.HEARTBEAT) for a in self.automata]
        self._seal(verdicts)
        return verdicts

    def in_violation(self) -> list[str]:
        return [a.id for a in self.automata if self.states[a.id] in a.violation_states]

    def _seal(self, verdicts: list[Verdict]) -> None:
        if self.store is None:
            return
        try:
            for v in verdicts:
                self.store.append_sealed(self.verdict_log_id, v.serialize())
        except KeyExhausted:
            self.halted = True
            raise
