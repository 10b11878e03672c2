"""Per-phase communication and operation counters."""

from __future__ import annotations

import csv
import io
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields

PROTOCOL_PHASES = ("Setup", "GradientCompute", "Perturb", "Protect", "Aggregate", "Reveal", "Update")
OFFLINE = "Offline"
TRACE_COLUMNS = ("phase", "party", "messages", "bytes", "rounds", "ring_ops", "plain_ops", "oracle_calls")


@dataclass
class PhaseTrace:
    phase: str
    party: str
    messages: int = 0
    bytes: int = 0
    rounds: int = 0
    ring_ops: int = 0
    plain_ops: int = 0
    oracle_calls: int = 0

    @property
    def ops(self) -> int:
        return self.ring_ops + self.plain_ops


class Tracer:
    """Collects PhaseTrace rows keyed by (phase, party).

    ``sequence`` records every phase entry in order, so one protocol iteration
    can be compared against a golden phase order.
    """

    def __init__(self) -> None:
        self.rows: dict[tuple[str, str], PhaseTrace] = {}
        self.sequence: list[str] = []
        self.flags: dict[str, int] = {}
        self._phase = "Setup"

    @property
    def current(self) -> str:
        return self._phase

    @contextmanager
    def phase(self, name: str):
        if name not in PROTOCOL_PHASES and name != OFFLINE:
            raise ValueError(f"unknown phase {name!r}")
        previous, self._phase = self._phase, name
        self.sequence.append(name)
        try:
            yield self
        finally:
            self._phase = previous

    def _row(self, party, phase: str | None = None) -> PhaseTrace:
        key = (phase or self._phase, str(party))
        row = self.rows.get(key)
        if row is None:
            row = self.rows[key] = PhaseTrace(*key)
        return row

    def message(self, sender, payload_bytes: int, count: int = 1, phase: str | None = None) -> None:
        row = self._row(sender, phase)
        row.messages += count
        row.bytes += payload_bytes * count

    def ops(self, party, ring: int = 0, plain: int = 0, phase: str | None = None) -> None:
        row = self._row(party, phase)
        row.ring_ops += int(ring)
        row.plain_ops += int(plain)

    def round(self, party, count: int = 1, phase: str | None = None) -> None:
        self._row(party, phase).rounds += count

    def oracle(self, party, count: int = 1) -> None:
        self._row(party).oracle_calls += count

    def flag(self, name: str, count: int = 1) -> None:
        self.flags[name] = self.flags.get(name, 0) + count

    # ------------------------------------------------------------------

    def phase_totals(self) -> dict[str, PhaseTrace]:
        totals: dict[str, PhaseTrace] = {}
        for (phase, _), row in self.rows.items():
            tot = totals.setdefault(phase, PhaseTrace(phase, "*"))
            for f in fields(PhaseTrace)[2:]:
                setattr(tot, f.name, getattr(tot, f.name) + getattr(row, f.name))
        return totals

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in self.rows.values():
            d = asdict(row)
            w.writerow([d[c] for c in TRACE_COLUMNS])
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def read_trace(path) -> list[PhaseTrace]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [PhaseTrace(r["phase"], r["party"], *(int(r[c]) for c in TRACE_COLUMNS[2:])) for r in rows]


def cost_report(tracer: Tracer) -> dict[str, dict[str, float]]:
    """Per-phase totals plus each phase's share of all counted operations."""
    totals = tracer.phase_totals()
    online = {k: v for k, v in totals.items() if k != OFFLINE}
    all_ops = sum(t.ops for t in online.values()) or 1
    report = {}
    for name, t in totals.items():
        report[name] = {
            "messages": t.messages,
            "bytes": t.bytes,
            "rounds": t.rounds,
            "ring_ops": t.ring_ops,
            "plain_ops": t.plain_ops,
            "oracle_calls": t.oracle_calls,
            "ops_share": t.ops / all_ops if name != OFFLINE else 0.0,
        }
    return report


def scaling_exponent(small: float, large: float, factor: float = 2.0) -> float:
    """Empirical order p with large / small = factor**p."""
    import math

    return math.log(large / small) / math.log(factor)
