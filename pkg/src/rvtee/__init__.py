"""Tamper-evident runtime verification toolkit.

Sealed logs with a burn-on-read keystream (:mod:`rvtee.hsm`,
:mod:`rvtee.seallog`), forensic verification (:mod:`rvtee.verifier`),
property monitors over boundary events (:mod:`rvtee.rvmon`), taint inference
(:mod:`rvtee.taint`) and the event bridge (:mod:`rvtee.bridge`).
"""

from .errors import (
    EmptyData,
    InvalidGeometry,
    KeyExhausted,
    MalformedEvent,
    MalformedHeader,
    MalformedRecord,
    OutOfOrderEvent,
    OutOfRange,
    OversizeLine,
    ParseError,
    RVTeeError,
    SemanticError,
    StorageFailure,
    UnknownLog,
)
from .hsm import SafeCopy, SealTag, SimulatedHSM, provision
from .rvmon import Boundary, Direction, Event, Monitor, PropertyAutomaton, Verdict, VerdictKind, load_spec, step
from .seallog import SealLogStore, SealRecord, decode_record, encode_record, iter_records
from .taint import SensitivePattern, TaintConfig, TaintMatch, TaintScanner, coarse_scan, fine_match, scan
from .verifier import FailureClass, VerificationReport, check_coverage, recompute_hmac, verify

__version__ = "0.1.0"

__all__ = [
    "EmptyData", "InvalidGeometry", "KeyExhausted", "MalformedEvent", "MalformedHeader", "MalformedRecord",
    "OutOfOrderEvent", "OutOfRange", "OversizeLine", "ParseError", "RVTeeError", "SemanticError",
    "StorageFailure", "UnknownLog",
    "SafeCopy", "SealTag", "SimulatedHSM", "provision",
    "Boundary", "Direction", "Event", "Monitor", "PropertyAutomaton", "Verdict", "VerdictKind", "load_spec", "step",
    "SealLogStore", "SealRecord", "decode_record", "encode_record", "iter_records",
    "SensitivePattern", "TaintConfig", "TaintMatch", "TaintScanner", "coarse_scan", "fine_match", "scan",
    "FailureClass", "VerificationReport", "check_coverage", "recompute_hmac", "verify",
]
