"""Metrics CSV with a frozen header."""
from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, field, fields

HEADER = ("step,examples_seen,live_rec_error,distance_value,train_cost,"
          "test_rec_error,test_distance,selection_metric,wall_ms")


@dataclass
class MetricsRow:
    step: int
    examples_seen: int
    live_rec_error: float
    distance_value: float
    train_cost: float
    test_rec_error: float
    test_distance: float
    selection_metric: float
    wall_ms: float

    def numeric(self) -> tuple:
        """Every column covered by the determinism contract (all but wall_ms)."""
        return astuple(self)[:-1]


assert ",".join(f.name for f in fields(MetricsRow)) == HEADER


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


@dataclass
class MetricsLog:
    rows: list[MetricsRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(HEADER + "\n")
        for row in self.rows:
            buf.write(",".join(_fmt(v) for v in astuple(row)) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> MetricsLog:
        lines = text.splitlines()
        if not lines or lines[0] != HEADER:
            raise ValueError("metrics CSV header mismatch")
        rows = []
        for rec in csv.reader(lines[1:]):
            rows.append(MetricsRow(int(rec[0]), int(rec[1]), *(float(v) for v in rec[2:])))
        return cls(rows)

    def last(self) -> MetricsRow:
        return self.rows[-1]
