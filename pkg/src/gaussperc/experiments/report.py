"""Deterministic CSV / JSON writers."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

PERCOLATE_COLUMNS = ("kernel", "alpha", "gamma", "event", "level", "R", "method", "trials",
                     "ess", "p_hat", "se", "ci_lo", "ci_hi", "seed")
FIT_COLUMNS = ("kernel", "alpha", "gamma", "event", "level", "model", "exponent", "exponent_se",
               "constant", "constant_se", "r_lo", "r_hi", "points", "reference_exponent",
               "reference_constant")
DIAMETER_COLUMNS = ("kernel", "alpha", "gamma", "level", "R", "trials", "d_median", "d_q25",
                    "d_q75", "log_scale", "ratio", "reference_ratio", "seed")
XI_COLUMNS = ("kernel", "alpha", "gamma", "level", "xi", "censored", "bracket_lo", "bracket_hi",
              "eps", "trials", "seed")
CAPACITY_TABLE_COLUMNS = ("family", "alpha", "n", "capacity", "c_alpha", "rel_error",
                          "extrapolated", "extrapolated_rel_error", "gap", "iterations", "converged")
COVARIANCE_COLUMNS = ("lag", "k_true", "k_emp", "se", "z")
ERROR_COLUMNS = ("job", "code", "message")


def format_value(v) -> str:
    """17 significant digits for floats; empty string for missing values."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".17g")
    s = str(v)
    if any(c in s for c in ',"\n'):
        s = '"' + s.replace('"', '""') + '"'
    return s


def write_csv(path, rows: Iterable[Mapping], columns: Sequence[str]) -> Path:
    path = Path(path)
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(format_value(row.get(c)) for c in columns))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return path


def _jsonable(v):
    if isinstance(v, Mapping):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    return v


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(obj), indent=2) + "\n", encoding="utf-8", newline="\n")
    return path


def emit_report(results, fmt: str, path, columns: Sequence[str] = None) -> Path:
    """Write ``results`` (rows for CSV, any JSON-able object for JSON) to ``path``."""
    if fmt == "csv":
        if columns is None:
            raise ValueError("CSV output needs a column list")
        return write_csv(path, results, columns)
    if fmt == "json":
        return write_json(path, results)
    raise ValueError(f"unknown report format {fmt!r}")


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
