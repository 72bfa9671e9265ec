"""Structured pass/fail records for inequality suites."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np


def _tolist(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


@dataclass
class BoundReport:
    """Verification record for one inequality on a grid of evaluation points.

    A point is a violation only when the margin exceeds tolerance (which
    already folds in 3 standard errors). Points without enough samples are
    flagged inconclusive rather than failed.
    """

    bound_id: str
    description: str
    points: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    se: np.ndarray
    tolerance: np.ndarray
    violations: int
    n_samples: int
    implied_constant: np.ndarray | None = None
    inconclusive: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def margins(self):
        return np.asarray(self.lhs) - np.asarray(self.rhs)

    @property
    def passed(self):
        return self.violations == 0

    def to_dict(self):
        return {
            "bound_id": self.bound_id,
            "description": self.description,
            "passed": bool(self.passed),
            "violations": int(self.violations),
            "n_samples": int(self.n_samples),
            "points": _tolist(np.asarray(self.points)),
            "lhs": _tolist(np.asarray(self.lhs)),
            "rhs": _tolist(np.asarray(self.rhs)),
            "margins": _tolist(self.margins),
            "se": _tolist(np.asarray(self.se)),
            "tolerance": _tolist(np.asarray(self.tolerance)),
            "implied_constant": _tolist(self.implied_constant)
            if self.implied_constant is not None else None,
            "inconclusive": _tolist(self.inconclusive)
            if self.inconclusive is not None else None,
            "meta": {k: _tolist(v) for k, v in self.meta.items()
                     if not isinstance(v, np.ndarray) or v.size <= 4096},
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    def write_csv(self, path):
        """Plot-ready rows: (x, lhs, rhs, margin, se, implied_c)."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "lhs", "rhs", "margin", "se", "implied_c"])
            pts = np.asarray(self.points)
            lhs = np.asarray(self.lhs)
            rhs = np.asarray(self.rhs)
            se = np.asarray(self.se)
            c = self.implied_constant
            for i in range(len(pts)):
                writer.writerow([
                    repr(float(pts[i])), repr(float(lhs[i])), repr(float(rhs[i])),
                    repr(float(lhs[i] - rhs[i])), repr(float(se[i])),
                    "" if c is None else repr(float(c[i])),
                ])


def summarize(reports):
    """One line per report: id, pass/fail, violations, worst margin."""
    lines = []
    for r in reports:
        margin = float(np.max(r.margins)) if np.size(r.margins) else 0.0
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status} {r.bound_id}: violations={r.violations} "
                     f"worst_margin={margin:.3e} n={r.n_samples} :: {r.description}")
    return lines
