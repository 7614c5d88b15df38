"""Wall-time overhead of streaming one participant's events through the bridge."""

from __future__ import annotations

import statistics
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .bridge import BridgeServer
from .demo.chat import SCENARIOS, run_scenario
from .fixtures import HANDSHAKE, fixture_text
from .hsm import provision
from .rvmon import load_spec
from .seallog import SealLogStore
from .taint import SensitivePattern, TaintScanner

EVENT_LOG, VERDICT_LOG = 1, 2

COLUMNS = ("No Instrumentation", "Instrumentation", "Increase")


class BenchAborted(RuntimeError):
    pass


@dataclass
class BenchRow:
    scenario: str
    plain: list[float] = field(default_factory=list)
    instrumented: list[float] = field(default_factory=list)

    @property
    def runs(self) -> int:
        return len(self.plain)

    @property
    def plain_mean(self) -> float:
        return statistics.fmean(self.plain)

    @property
    def instrumented_mean(self) -> float:
        return statistics.fmean(self.instrumented)

    @property
    def increase(self) -> float:
        return (self.instrumented_mean - self.plain_mean) / self.plain_mean


@dataclass
class BenchReport:
    rows: list[BenchRow]
    events_sealed: int = 0

    def format_table(self) -> str:
        head = f"{'Time (s)':<14}" + "".join(f"{c:>22}" for c in COLUMNS)
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{'Scenario ' + r.scenario:<14}{r.plain_mean:>22.3f}{r.instrumented_mean:>22.3f}"
                         f"{r.increase * 100:>21.2f}%")
        runs = self.rows[0].runs if self.rows else 0
        lines.append(f"(mean of {runs} runs; {self.events_sealed} events sealed)")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "columns": list(COLUMNS),
            "rows": [{"scenario": r.scenario, "runs": r.runs, "no_instrumentation": r.plain_mean,
                      "instrumentation": r.instrumented_mean, "increase": r.increase} for r in self.rows],
            "events_sealed": self.events_sealed,
        }


def run_bench(scenarios: Sequence[str] = ("A",), runs: int = 10, *, messages: int = 10,
              pause: float = 0.05, workdir=None) -> BenchReport:
    """Alternate plain and instrumented runs of each scenario ``runs`` times."""
    for s in scenarios:
        if s not in SCENARIOS:
            raise ValueError(f"unknown scenario {s!r}")
    if runs < 1:
        raise ValueError("runs must be >= 1")
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        tmp = Path(tmp)
        hsm, _ = provision(key_length=1 << 20)
        store = SealLogStore(hsm, tmp / "seal.log", {EVENT_LOG: tmp / "events.log", VERDICT_LOG: tmp / "verdicts.log"})
        scanner = TaintScanner([SensitivePattern("room-secret", b"room-secret")])
        server = BridgeServer("127.0.0.1:0", load_spec(fixture_text(HANDSHAKE)), store, event_log_id=EVENT_LOG,
                              verdict_log_id=VERDICT_LOG, scanner=scanner)
        server.start()
        try:
            rows = []
            for s in scenarios:
                row = BenchRow(s)
                for _ in range(runs):
                    try:
                        row.plain.append(run_scenario(s, messages=messages, pause=pause).seconds)
                        row.instrumented.append(
                            run_scenario(s, messages=messages, pause=pause, endpoint=server.endpoint).seconds)
                    except Exception as exc:
                        raise BenchAborted(f"scenario {s} run aborted: {exc}") from exc
                    server.wait_sessions(len(row.instrumented) + sum(r.runs for r in rows), timeout=10)
                    if server.fatal:
                        raise BenchAborted(server.fatal)
                rows.append(row)
        finally:
            server.close()
        bad = [s for s in server.summaries if s.fatal or s.violations]
        if bad:
            raise BenchAborted(f"instrumented session reported a problem: {bad[0]}")
        return BenchReport(rows, events_sealed=store.record_count)
