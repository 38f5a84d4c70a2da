"""Tabular reports: deterministic CSV plus a JSON metadata sidecar."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

SCHEMA_VERSION = 1
EXACT_THRESHOLD = 1e-10


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def check_row(name, lhs, rhs, se, tolerance, **extra):
    """A generic comparison row; ``pass`` is |lhs - rhs| <= tolerance."""
    row = {"name": name, "lhs": float(lhs), "rhs": float(rhs), "se": float(se), "tolerance": float(tolerance)}
    row["pass"] = bool(abs(row["lhs"] - row["rhs"]) <= row["tolerance"])
    row.update(extra)
    return row


@dataclass
class Report:
    experiment: str
    columns: list
    rows: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    wall_time: float = 0.0
    complete: bool = True

    @property
    def passed(self):
        return self.complete and all(bool(r.get("pass", True)) for r in self.rows)

    def csv_text(self):
        import io

        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_cell(row.get(c, "")) for c in self.columns])
        return buf.getvalue()

    def metadata(self):
        from . import __version__

        return {
            "schema_version": SCHEMA_VERSION,
            "experiment": self.experiment,
            "version": __version__,
            "config": self.config,
            "wall_time": self.wall_time,
            "complete": self.complete,
            "passed": self.passed,
            "diagnostics": _jsonable(self.diagnostics),
        }

    def write(self, out):
        """Write ``out`` (CSV) and ``out`` with a .json suffix (metadata)."""
        out = Path(out)
        out.write_text(self.csv_text())
        out.with_suffix(".json").write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")
        return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


@dataclass
class OrderFit:
    slope: float
    intercept: float
    r2: float
    exact: bool

    @property
    def label(self):
        return "exact" if self.exact else f"{self.slope:.3f}"


def fit_order(steps, errors):
    """Least-squares slope of log(error) against log(ds) on >= 3 grids.

    A series whose errors are all below round-off is reported as exact.
    """
    steps = np.asarray(steps, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if steps.size < 3:
        raise ValueError("an order fit needs at least three grids")
    if np.all(errors <= EXACT_THRESHOLD):
        return OrderFit(math.inf, 0.0, 1.0, True)
    if np.any(errors <= 0):
        errors = np.maximum(errors, EXACT_THRESHOLD)
    ds = 1.0 / steps
    res = stats.linregress(np.log(ds), np.log(errors))
    return OrderFit(float(res.slope), float(res.intercept), float(res.rvalue**2), False)
