"""Operator entry points: ``rvtee init | monitor | verify | tamper | bench``.

Exit status: 0 ok/pass, 1 verification failed, 2 usage or config error,
3 fatal runtime error (for example an exhausted keystream).
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import random
import signal
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import tamper
from .bench import BenchAborted, run_bench
from .bridge import DEFAULT_ENDPOINT, ENDPOINT_ENV, BridgeServer
from .errors import RVTeeError
from .fixtures import HANDSHAKE, KEY_EGRESS, fixture_path
from .hsm import DEFAULT_CHUNK_SIZE, SafeCopy, SimulatedHSM, check_geometry, provision
from .rvmon import load_spec_files
from .seallog import SealLogStore, iter_records, load_registry, save_registry
from .taint import TaintConfig, TaintScanner, load_patterns
from .verifier import verify

EXIT_OK, EXIT_TAMPER, EXIT_USAGE, EXIT_FATAL = 0, 1, 2, 3

DEVICE_FILE = "hsm.dev"
SEAL_LOG_FILE = "seal.log"
REGISTRY_FILE = "registry.tsv"
SAFE_COPY_FILE = "keystream.rvk"
EVENT_LOG_ID, VERDICT_LOG_ID = 1, 2
DEFAULT_LOGS = {EVENT_LOG_ID: "logs/events.log", VERDICT_LOG_ID: "logs/verdicts.log"}

TAMPER_KINDS = ("flip-byte", "truncate-log", "drop-record", "swap-records", "edit-field")


class UsageError(Exception):
    pass


@dataclass
class Config:
    store_dir: Path = Path("rvtee-store")
    forensic_dir: Path = Path("rvtee-forensic")
    key_length: int = 2 * 1024 * 1024
    chunk_size: int = DEFAULT_CHUNK_SIZE
    fsync: bool = False
    endpoint: str = DEFAULT_ENDPOINT
    properties: list[Path] = field(default_factory=list)
    patterns: Path | None = None
    taint: TaintConfig = field(default_factory=TaintConfig)

    @property
    def device(self) -> Path:
        return self.store_dir / DEVICE_FILE

    @property
    def seal_log(self) -> Path:
        return self.store_dir / SEAL_LOG_FILE

    @property
    def registry(self) -> Path:
        return self.store_dir / REGISTRY_FILE

    @property
    def safe_copy(self) -> Path:
        return self.forensic_dir / SAFE_COPY_FILE


def load_config(path: str | None) -> Config:
    """Read an INI file with ``[store]``, ``[bridge]``, ``[monitor]`` and ``[taint]`` sections."""
    cfg = Config(endpoint=os.environ.get(ENDPOINT_ENV, DEFAULT_ENDPOINT))
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    base = Path(path).parent

    def rel(value: str) -> Path:
        p = Path(value).expanduser()
        return p if p.is_absolute() else base / p

    try:
        if parser.has_section("store"):
            s = parser["store"]
            cfg.store_dir = rel(s.get("dir", str(cfg.store_dir)))
            cfg.forensic_dir = rel(s.get("forensic_dir", str(cfg.forensic_dir)))
            cfg.key_length = s.getint("key_length", cfg.key_length)
            cfg.chunk_size = s.getint("chunk_size", cfg.chunk_size)
            cfg.fsync = s.getboolean("fsync", cfg.fsync)
        if parser.has_section("bridge"):
            cfg.endpoint = parser["bridge"].get("endpoint", cfg.endpoint)
        if parser.has_section("monitor"):
            cfg.properties = [rel(p) for p in parser["monitor"].get("properties", "").split()]
        if parser.has_section("taint"):
            t = parser["taint"]
            if t.get("patterns"):
                cfg.patterns = rel(t["patterns"])
            d = TaintConfig()
            cfg.taint = TaintConfig(
                window_size=t.getint("window_size", d.window_size),
                stride=t.getint("stride", d.stride),
                coarse_threshold=t.getfloat("coarse_threshold", d.coarse_threshold),
                max_edit_distance=t.getint("max_edit_distance", d.max_edit_distance),
                qgram_size=t.getint("qgram_size", d.qgram_size),
            )
    except ValueError as exc:
        raise UsageError(f"bad value in {path}: {exc}") from None
    return cfg


def _apply_overrides(cfg: Config, args) -> Config:
    if getattr(args, "store", None):
        cfg.store_dir = Path(args.store)
    if getattr(args, "forensic", None):
        cfg.forensic_dir = Path(args.forensic)
    return cfg


def _require(*paths: Path) -> None:
    for p in paths:
        if not p.exists():
            raise UsageError(f"missing file: {p}")


# --- subcommands --------------------------------------------------------------------

def cmd_init(cfg: Config, args) -> int:
    if args.key_length is not None:
        cfg.key_length = args.key_length
    if args.chunk_size is not None:
        cfg.chunk_size = args.chunk_size
    try:
        check_geometry(cfg.key_length, cfg.chunk_size)
    except RVTeeError as exc:
        raise UsageError(str(exc)) from None

    ours = [cfg.device, cfg.seal_log, cfg.registry, cfg.safe_copy]
    ours += [cfg.store_dir / p for p in DEFAULT_LOGS.values()]
    store_busy = cfg.store_dir.exists() and any(cfg.store_dir.iterdir())
    if (store_busy or cfg.safe_copy.exists()) and not args.force:
        raise UsageError(f"{cfg.store_dir} or {cfg.safe_copy} already holds a store; use --force to replace it")
    for p in ours:
        if p.exists():
            p.unlink()

    cfg.store_dir.mkdir(parents=True, exist_ok=True)
    cfg.forensic_dir.mkdir(parents=True, exist_ok=True)
    hsm, safe = provision(os.urandom, cfg.key_length, cfg.chunk_size)
    safe.save(cfg.safe_copy)
    hsm.save(cfg.device)
    registry = {}
    for log_id, rel in DEFAULT_LOGS.items():
        p = cfg.store_dir / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.touch()
        registry[log_id] = p
    save_registry(cfg.registry, registry)
    SealLogStore(hsm, cfg.seal_log, registry)
    print(f"provisioned {cfg.key_length}-octet keystream in {cfg.chunk_size}-octet chunks "
          f"({safe.capacity} appends)")
    print(f"device:     {cfg.device}")
    print(f"seal log:   {cfg.seal_log}")
    print(f"registry:   {cfg.registry}")
    print(f"safe copy:  {cfg.safe_copy}  (move to the forensic node)")
    return EXIT_OK


def cmd_verify(cfg: Config, args) -> int:
    _require(cfg.safe_copy, cfg.seal_log, cfg.registry)
    try:
        safe = SafeCopy.load(cfg.safe_copy)
        logs = load_registry(cfg.registry)
    except (RVTeeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    attested = args.attested_offset
    if args.attest:
        _require(cfg.device)
        attested = SimulatedHSM.load(cfg.device, persistent=False).attested_key_offset()
    report = verify(logs, cfg.seal_log, safe, attested)
    print(report.to_json() if args.json else report.to_text())
    return EXIT_OK if report.passed else EXIT_TAMPER


def cmd_tamper(cfg: Config, args) -> int:
    _require(cfg.seal_log, cfg.registry)
    rng = random.Random(args.seed)
    registry = load_registry(cfg.registry)
    n = tamper.record_count(cfg.seal_log)
    if n == 0:
        raise UsageError("store holds no sealed records; nothing to tamper with")

    def pick_log() -> tuple[int, Path]:
        if args.log_id is not None:
            if args.log_id not in registry:
                raise UsageError(f"log {args.log_id} is not registered")
            return args.log_id, registry[args.log_id]
        nonempty = [(i, p) for i, p in sorted(registry.items()) if p.exists() and p.stat().st_size]
        if not nonempty:
            raise UsageError("all logs are empty; nothing to tamper with")
        return rng.choice(nonempty)

    def index(value, default):
        i = default if value is None else value
        if not -n <= i < n:
            raise UsageError(f"record index {i} out of range (0..{n - 1})")
        return i % n

    try:
        if args.kind == "flip-byte":
            if args.in_seal_log:
                target = cfg.seal_log
            else:
                _, target = pick_log()
            size = target.stat().st_size if target.exists() else 0
            if size == 0:
                raise UsageError(f"{target} is empty; nothing to tamper with")
            offset = rng.randrange(size) if args.offset is None else args.offset
            if not 0 <= offset < size:
                raise UsageError(f"offset {offset} outside {target} ({size} octets)")
            tamper.flip_byte(target, offset, args.mask)
            print(f"flipped byte {offset} of {target} with mask 0x{args.mask:02x}")
        elif args.kind == "truncate-log":
            log_id, target = pick_log()
            size = target.stat().st_size
            length = rng.randrange(size) if args.length is None else args.length
            if not 0 <= length < size:
                raise UsageError(f"length {length} does not shorten log {log_id} ({size} octets)")
            tamper.truncate(target, length)
            print(f"truncated log {log_id} ({target}) from {size} to {length} octets")
        elif args.kind == "drop-record":
            i = index(args.index, -1)
            rec = tamper.drop_record(cfg.seal_log, i)
            print(f"dropped record {i} (log {rec.log_id}, bytes [{rec.log_offset}, {rec.end}))")
        elif args.kind == "swap-records":
            if n < 2:
                raise UsageError("swap-records needs at least two records")
            if args.index is None and args.other is None:
                i, j = rng.sample(range(n), 2)
            else:
                i, j = index(args.index, 0), index(args.other, 1)
            if i == j:
                raise UsageError("swap-records needs two distinct indices")
            tamper.swap_records(cfg.seal_log, i, j)
            print(f"swapped records {i} and {j}")
        else:
            i = index(args.index, rng.randrange(n))
            records = list(iter_records(cfg.seal_log))
            old = getattr(records[i], args.field)
            if args.field == "hmac":
                value = bytes([old[0] ^ 0x01]) + old[1:]
            else:
                value = old + 1 if args.value is None else args.value
            tamper.edit_field(cfg.seal_log, i, args.field, value)
            shown = value.hex() if isinstance(value, bytes) else value
            print(f"record {i}: {args.field} changed to {shown}")
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return EXIT_OK


def _interrupt(signum, frame):
    raise KeyboardInterrupt


def cmd_monitor(cfg: Config, args) -> int:
    _require(cfg.device, cfg.seal_log, cfg.registry)
    props = [Path(p) for p in args.properties] or cfg.properties or [
        Path(str(fixture_path(HANDSHAKE))), Path(str(fixture_path(KEY_EGRESS)))]
    try:
        automata = load_spec_files(props)
        hsm = SimulatedHSM.load(cfg.device)
        store = SealLogStore(hsm, cfg.seal_log, load_registry(cfg.registry), fsync=cfg.fsync)
        patterns = load_patterns(cfg.patterns) if cfg.patterns else []
        scanner = TaintScanner(patterns, cfg.taint)
    except (OSError, ValueError, RVTeeError) as exc:
        raise UsageError(str(exc)) from None
    for log_id, (a, b) in store.orphans.items():
        print(f"warning: log {log_id} has unsealed bytes [{a}, {b}); they stay unsealed", file=sys.stderr)

    endpoint = args.endpoint or cfg.endpoint
    server = BridgeServer(endpoint, automata, store, event_log_id=EVENT_LOG_ID,
                          verdict_log_id=VERDICT_LOG_ID, scanner=scanner,
                          on_summary=lambda s: print(json.dumps({"session": s.to_dict()}), flush=True))
    print(f"listening on {server.endpoint} with {len(automata)} properties, "
          f"{len(patterns)} taint patterns, {hsm.remaining} seals left", flush=True)
    try:
        if args.sessions:
            for _ in range(args.sessions):
                server.handle_one()
                if server.fatal:
                    break
        else:
            signal.signal(signal.SIGTERM, _interrupt)
            server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    if server.fatal:
        print(f"fatal: {server.fatal}", file=sys.stderr)
        return EXIT_FATAL
    return EXIT_OK


def cmd_bench(cfg: Config, args) -> int:
    scenarios = ("A", "B") if args.scenario == "both" else (args.scenario,)
    try:
        report = run_bench(scenarios, args.runs, messages=args.messages, pause=args.pause)
    except BenchAborted as exc:
        print(f"bench aborted: {exc}", file=sys.stderr)
        return EXIT_FATAL
    print(json.dumps(report.to_dict(), indent=2) if args.json else report.format_table())
    return EXIT_OK


# --- argument parsing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rvtee", description="Tamper-evident runtime verification toolkit.")
    ap.add_argument("--config", help="INI config file (store paths, endpoint, taint defaults, property files)")
    ap.add_argument("-v", "--verbose", action="store_true", help="log debug output")
    sub = ap.add_subparsers(dest="command", required=True)

    def store_flags(p):
        p.add_argument("--store", help="store directory (device, SEAL_log, registry, logs)")
        p.add_argument("--forensic", help="forensic directory holding the keystream safe copy")

    p = sub.add_parser("init", help="provision a keystream and create an empty store")
    store_flags(p)
    p.add_argument("--key-length", type=int, help="keystream length in octets")
    p.add_argument("--chunk-size", type=int, help="key chunk consumed per append")
    p.add_argument("--force", action="store_true", help="replace an existing store")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("monitor", help="run the event bridge and property monitors")
    store_flags(p)
    p.add_argument("--endpoint", help=f"host:port or unix:/path (default from config or ${ENDPOINT_ENV})")
    p.add_argument("--properties", nargs="*", default=[], help="property documents to load")
    p.add_argument("--sessions", type=int, default=0, help="exit after this many connections (0: run until interrupted)")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("verify", help="authenticate the store against the safe copy")
    store_flags(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--attested-offset", type=int, help="key octets the device reports as consumed")
    g.add_argument("--attest", action="store_true", help="read the consumed offset from the device file")
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("tamper", help="apply one adversarial mutation (drills only)")
    store_flags(p)
    p.add_argument("kind", choices=TAMPER_KINDS)
    p.add_argument("--seed", type=int, default=0, help="seed for randomly chosen targets")
    p.add_argument("--log-id", type=int, help="log to mutate (flip-byte, truncate-log)")
    p.add_argument("--seal-log", dest="in_seal_log", action="store_true", help="flip-byte: target the SEAL_log")
    p.add_argument("--offset", type=int, help="flip-byte: octet offset")
    p.add_argument("--mask", type=lambda s: int(s, 0), default=0x01, help="flip-byte: XOR mask")
    p.add_argument("--length", type=int, help="truncate-log: new length")
    p.add_argument("--index", type=int, help="record index (drop-record, swap-records, edit-field)")
    p.add_argument("--other", type=int, help="swap-records: second index")
    p.add_argument("--field", choices=tamper.RECORD_FIELDS, default="data_size", help="edit-field: field")
    p.add_argument("--value", type=int, help="edit-field: new integer value (default old+1)")
    p.set_defaults(func=cmd_tamper)

    p = sub.add_parser("bench", help="measure instrumentation overhead on the chat fixture")
    p.add_argument("--scenario", choices=("A", "B", "both"), default="both")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--messages", type=int, default=10, help="scripted messages per participant")
    p.add_argument("--pause", type=float, default=0.05, help="artificial pause between messages (s)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        return args.func(cfg, args)
    except UsageError as exc:
        print(f"rvtee {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RVTeeError as exc:
        print(f"rvtee {args.command}: fatal: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
