"""Wall-clock accounting for parallel versus local training.

Two measured totals (data parallel, and local with period H1) determine the
communication share of the parallel run: local training communicates
``1/H1`` as often, so the difference of the totals is ``(1 - 1/H1)`` of the
communication time. Predictions for other periods or rules scale that
communication time by the communication volume.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

from .errors import ParameterError

HOUR_KEYS = {"hours", "comm", "total", "measured"}


def estimate_comm_time(t_tot_para: float, t_tot_h1: float, h1: int):
    """Split the parallel total into ``(comm, comp)`` hours."""
    if h1 < 2:
        raise ParameterError(f"H1 must be >= 2, got {h1}")
    comm = h1 / (h1 - 1) * (t_tot_para - t_tot_h1)
    if comm < 0.0:
        warnings.warn(f"negative communication estimate {comm:.3g} h; check the measured totals",
                      RuntimeWarning, stacklevel=2)
    return comm, t_tot_para - comm


def predict_total(t_comm_para: float, t_comp_para: float, h2: float) -> float:
    if h2 < 1:
        raise ParameterError(f"H2 must be >= 1, got {h2}")
    return t_comm_para / h2 + t_comp_para


def qsr_comm_time(f: float, t_comm_para: float) -> float:
    """Communication hours of a rule that syncs a fraction ``f`` as often as parallel."""
    if not 0.0 < f <= 1.0:
        raise ParameterError(f"communication fraction must lie in (0, 1], got {f}")
    return f * t_comm_para


@dataclass
class CommLedger:
    t_tot_para: float
    t_tot_h1: float
    h1: int
    t_comm_para: float = field(init=False)
    t_comp_para: float = field(init=False)
    by_period: dict = field(default_factory=dict)
    by_fraction: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t_comm_para, self.t_comp_para = estimate_comm_time(
            self.t_tot_para, self.t_tot_h1, self.h1
        )

    @property
    def negative_comm(self) -> bool:
        """Measurement noise can make the estimate negative; flagged, never clamped."""
        return self.t_comm_para < 0.0

    def add_period(self, h2: int, measured: float = None) -> dict:
        total = predict_total(self.t_comm_para, self.t_comp_para, h2)
        row = {"H": h2, "comm": self.t_comm_para / h2, "total": total, "measured": measured}
        if measured is not None:
            row["rel_error"] = abs(total - measured) / measured
        self.by_period[h2] = row
        return row

    def add_fraction(self, name: str, f: float, measured: float = None) -> dict:
        comm = qsr_comm_time(f, self.t_comm_para)
        total = comm + self.t_comp_para
        row = {"rule": name, "fraction": f, "comm": comm, "total": total, "measured": measured}
        if measured is not None:
            row["rel_error"] = abs(total - measured) / measured
        self.by_fraction[name] = row
        return row

    def to_dict(self, ndigits: int = None) -> dict:
        def r(v, key="hours"):
            if ndigits is None or key not in HOUR_KEYS or not isinstance(v, float):
                return v
            return round(v, ndigits)

        return {
            "T_tot_para": self.t_tot_para,
            "T_tot_H1": self.t_tot_h1,
            "H1": self.h1,
            "T_comm_para": r(self.t_comm_para),
            "T_comp_para": r(self.t_comp_para),
            "negative_comm": self.negative_comm,
            "periods": [{k: r(v, k) for k, v in row.items()}
                        for _, row in sorted(self.by_period.items())],
            "rules": [{k: r(v, k) for k, v in row.items()} for row in self.by_fraction.values()],
        }

    def report(self) -> dict:
        """Values rounded to 0.1 h, the precision of the measured tables."""
        return self.to_dict(ndigits=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["setting", "fraction", "comm_hours", "total_hours", "measured_hours"])
        w.writerow(["parallel", repr(1.0), repr(self.t_comm_para), repr(self.t_tot_para),
                    repr(self.t_tot_para)])
        for h2, row in sorted(self.by_period.items()):
            w.writerow([f"H={h2}", repr(1.0 / h2), repr(row["comm"]), repr(row["total"]),
                        "" if row["measured"] is None else repr(row["measured"])])
        for name, row in self.by_fraction.items():
            w.writerow([name, repr(row["fraction"]), repr(row["comm"]), repr(row["total"]),
                        "" if row["measured"] is None else repr(row["measured"])])
        return buf.getvalue()

