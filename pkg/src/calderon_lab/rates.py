"""Scale-sweep tables with log-log slope fits and trend verdicts."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["RateSeries", "RateTable", "fit_slope", "trend_verdict"]

PASS = "PASS"
FAIL = "FAIL"
FLAG = "FLAG"  # trend violated for a profile where saturation is permitted


def fit_slope(params, values) -> float:
    """Least-squares slope of ``log(value)`` against ``log(param)``.

    Returns NaN when fewer than two strictly positive samples are available.
    """
    p = np.asarray(params, float)
    v = np.asarray(values, float)
    ok = np.isfinite(v) & (v > 0)
    if ok.sum() < 2:
        return math.nan
    slope, _ = np.polyfit(np.log(p[ok]), np.log(v[ok]), 1)
    return float(slope)


def trend_verdict(values, rule: str, tol: float) -> bool:
    """Evaluate a finite-sample trend rule on a sequence.

    Rules
    -----
    ``nonincreasing``
        ``v[i+1] <= (1 + tol) v[i]`` for all consecutive pairs.
    ``decreasing``
        ``v[i+1] < v[i]`` for all consecutive pairs (``tol`` ignored).
    ``bounded``
        ``max / min <= tol`` (all values positive).
    ``top_half_nonincreasing``
        ``nonincreasing`` applied to the upper half of the sweep, i.e. the
        last ``ceil(n/2)`` samples with at least two of them.
    """
    v = np.asarray(values, float)
    if v.size == 0 or not np.all(np.isfinite(v)):
        return False
    if np.all(v == 0):
        return True  # vacuous: nothing to decay
    if rule == "nonincreasing":
        return bool(np.all(v[1:] <= (1 + tol) * v[:-1]))
    if rule == "decreasing":
        return bool(np.all(v[1:] < v[:-1]))
    if rule == "bounded":
        if np.any(v <= 0):
            return False
        return bool(v.max() / v.min() <= tol)
    if rule == "top_half_nonincreasing":
        m = max(2, math.ceil(v.size / 2))
        tail = v[-m:]
        return bool(np.all(tail[1:] <= (1 + tol) * tail[:-1]))
    raise ValueError(f"unknown trend rule {rule!r}")


@dataclass
class RateSeries:
    """One measured quantity across the sweep."""

    norm_name: str
    exponent: float
    rule: str
    tol: float
    params: list = field(default_factory=list)
    values: list = field(default_factory=list)
    failed: list = field(default_factory=list)  # parameters whose sample failed
    strict: bool = True

    @property
    def normalized(self) -> list:
        return [v * p**self.exponent for p, v in zip(self.params, self.values)]

    @property
    def slope(self) -> float:
        return fit_slope(self.params, self.values)

    @property
    def verdict(self) -> str:
        ok = not self.failed and trend_verdict(self.normalized, self.rule, self.tol)
        if ok:
            return PASS
        return FAIL if self.strict else FLAG


@dataclass
class RateTable:
    """Collection of :class:`RateSeries` sharing a scale parameter.

    ``parameter`` names the scale (``t`` for mollifier sweeps, ``s`` for
    CGO sweeps).  CSV output has columns ``t, norm_name, value,
    normalized_value`` regardless of the parameter name so that tables from
    different sweeps concatenate; JSON output adds slopes and verdicts.
    """

    parameter: str = "t"
    series: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add_series(self, name, exponent=0.0, rule="nonincreasing", tol=0.05, strict=True):
        self.series[name] = RateSeries(name, float(exponent), rule, float(tol), strict=strict)
        return self.series[name]

    def record(self, name, param, value):
        s = self.series[name]
        s.params.append(float(param))
        s.values.append(float(value))

    def mark_failed(self, param, reason: str = ""):
        for s in self.series.values():
            s.failed.append(float(param))
        self.meta.setdefault("failures", []).append({self.parameter: float(param), "reason": reason})

    @property
    def partial(self) -> bool:
        return any(s.failed for s in self.series.values())

    @property
    def verdicts(self) -> dict:
        return {n: s.verdict for n, s in self.series.items()}

    @property
    def passed(self) -> bool:
        return all(v == PASS for v in self.verdicts.values())

    def rows(self):
        for s in self.series.values():
            for p, v, q in zip(s.params, s.values, s.normalized):
                yield p, s.norm_name, v, q

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["t", "norm_name", "value", "normalized_value"])
        for p, n, v, q in self.rows():
            w.writerow([repr(p), n, repr(v), repr(q)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def to_dict(self) -> dict:
        return {
            "parameter": self.parameter,
            "partial": self.partial,
            "meta": self.meta,
            "series": [
                {
                    "norm_name": s.norm_name,
                    "target_exponent": s.exponent,
                    "rule": s.rule,
                    "tolerance": s.tol,
                    self.parameter: s.params,
                    "value": s.values,
                    "normalized_value": s.normalized,
                    "fitted_slope": None if math.isnan(s.slope) else s.slope,
                    "verdict": s.verdict,
                    "failed": s.failed,
                }
                for s in self.series.values()
            ],
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text: str, parameter: str = "t") -> "RateTable":
        table = cls(parameter=parameter)
        for row in csv.DictReader(io.StringIO(text)):
            name = row["norm_name"]
            if name not in table.series:
                table.add_series(name)
            p, v, q = float(row["t"]), float(row["value"]), float(row["normalized_value"])
            if v != 0 and p != 1:
                table.series[name].exponent = math.log(q / v) / math.log(p)
            table.record(name, p, v)
        return table
