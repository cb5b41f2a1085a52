"""JSON serialization of :class:`EstimateReport`.

Floats go through ``repr`` (shortest round-trip form), so reading a report
and writing it again reproduces the same bytes.
"""

from __future__ import annotations

import json
import math

from ..errors import DataError
from .types import Diagnostics, EstimateReport


def _num(v):
    if v is None:
        return None
    v = float(v)
    if not math.isfinite(v):
        return None
    return v


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, int):
        return obj
    try:
        f = float(obj)
    except (TypeError, ValueError):
        return str(obj)
    if f.is_integer() and hasattr(obj, "dtype") and obj.dtype.kind in "iu":
        return int(f)
    return _num(f)


def report_to_dict(report: EstimateReport) -> dict:
    d = report.diagnostics
    return {
        "method": report.method,
        "estimate": _num(report.estimate),
        "se": _num(report.se),
        "ci": None if report.ci is None else [_num(report.ci[0]), _num(report.ci[1])],
        "level": _num(report.level),
        "diagnostics": {
            "iterations": int(d.iterations),
            "converged": bool(d.converged),
            "loglik": _num(d.loglik),
            "warnings": [str(w) for w in d.warnings],
        },
        "params": _clean(report.params),
        "extras": _clean(report.extras),
    }


def report_to_json(report: EstimateReport) -> str:
    return json.dumps(report_to_dict(report), indent=2, allow_nan=False) + "\n"


def report_from_dict(data: dict) -> EstimateReport:
    try:
        diag = data["diagnostics"]
        ci = data.get("ci")
        return EstimateReport(
            estimate=float(data["estimate"]) if data["estimate"] is not None else math.nan,
            method=str(data["method"]),
            se=None if data.get("se") is None else float(data["se"]),
            ci=None if ci is None else (float(ci[0]), float(ci[1])),
            level=None if data.get("level") is None else float(data["level"]),
            diagnostics=Diagnostics(
                iterations=int(diag["iterations"]),
                converged=bool(diag["converged"]),
                loglik=None if diag.get("loglik") is None else float(diag["loglik"]),
                warnings=list(diag.get("warnings", [])),
            ),
            params=dict(data.get("params", {})),
            extras=dict(data.get("extras", {})),
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise DataError(f"malformed report: {exc}") from exc


def report_from_json(text: str) -> EstimateReport:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"report is not valid JSON: {exc}") from exc
    return report_from_dict(data)
