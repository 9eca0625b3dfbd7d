"""Metric rows collected during a run and their CSV export."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Dict, List

SCHEMAS = {
    "rates": ("time_ms", "flow", "receiver", "rate_kbps"),
    "buffer": ("time_ms", "flow", "receiver", "occupancy_ms", "sigma_hat_ms", "bound_L_ms"),
    "latency": ("time_ms", "flow", "receiver", "latency_ms"),
    "switches": ("time_ms", "flow", "receiver", "old_parent", "new_parent", "old_rate_kbps",
                 "new_rate_kbps", "reason"),
    "timeouts": ("time_ms", "flow", "receiver", "delay_ms"),
    "frames": ("flow", "receiver", "generated", "on_time", "lost", "dropped", "in_flight", "late_packets"),
    "membership": ("time_ms", "kind", "surrogate", "epoch"),
}


@dataclass
class MetricsLog:
    rows: Dict[str, List[tuple]] = field(default_factory=lambda: {k: [] for k in SCHEMAS})

    def add(self, family: str, *row) -> None:
        self.rows[family].append(row)

    def column(self, family: str, name: str, **match) -> List:
        cols = SCHEMAS[family]
        k = cols.index(name)
        idx = [(cols.index(c), v) for c, v in match.items()]
        return [r[k] for r in self.rows[family] if all(r[i] == v for i, v in idx)]

    def select(self, family: str, **match) -> List[dict]:
        cols = SCHEMAS[family]
        idx = [(cols.index(c), v) for c, v in match.items()]
        return [dict(zip(cols, r)) for r in self.rows[family] if all(r[i] == v for i, v in idx)]


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.3f}"
    return v


def export_metrics(log: MetricsLog, path: str, prefix: str = "") -> List[str]:
    """One CSV per family, columns in schema order; floats with 3 decimals."""
    os.makedirs(path, exist_ok=True)
    written = []
    for family, cols in SCHEMAS.items():
        fn = os.path.join(path, f"{prefix}{family}.csv")
        with open(fn, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in log.rows.get(family, ()):
                w.writerow([_fmt(v) for v in row])
        written.append(fn)
    return written
