"""CSV, JSON and INI persistence.

Formats
-------
* response / predicted matrices: headerless, one respondent per row, one
  item per column, comma separated.
* parameter files: header ``kind,index,true,estimated``; either value column
  may be empty when unknown.
* floats are written with 17 significant digits so every value round-trips.
"""

from __future__ import annotations

import configparser
import csv
import json
import math
from pathlib import Path

import numpy as np

PARAM_HEADER = ["kind", "index", "true", "estimated"]


class InputError(ValueError):
    """Malformed input file; the message names the file, line and field."""

    def __init__(self, path, message: str, line: int | None = None, field: str | None = None):
        where = str(path)
        if line is not None:
            where += f", line {line}"
        if field is not None:
            where += f", field {field!r}"
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line = line
        self.field = field


def fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return "nan"
    return "%.17g" % x


def _parse_float(text: str, path, line: int, field: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise InputError(path, f"not a number: {text!r}", line, field) from None


def write_matrix_csv(path, values) -> None:
    values = np.asarray(values, dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in values:
            writer.writerow([fmt(v) for v in row])


def read_matrix_csv(path, unit_interval: bool = True) -> np.ndarray:
    """Read a dense headerless matrix.

    With ``unit_interval`` every entry must lie in [0, 1].
    """
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            vals = []
            for col, cell in enumerate(row, start=1):
                field = f"column {col}"
                if not cell.strip():
                    raise InputError(path, "missing value", lineno, field)
                v = _parse_float(cell, path, lineno, field)
                if not math.isfinite(v):
                    raise InputError(path, f"non-finite value {cell!r}", lineno, field)
                if unit_interval and not 0.0 <= v <= 1.0:
                    raise InputError(path, f"response {v} outside [0, 1]", lineno, field)
                vals.append(v)
            if rows and len(vals) != len(rows[0]):
                raise InputError(
                    path, f"expected {len(rows[0])} columns, found {len(vals)}", lineno
                )
            rows.append(vals)
    if not rows:
        raise InputError(path, "file contains no data")
    return np.array(rows, dtype=float)


def param_rows(kind: str, true=None, estimated=None):
    n = len(true) if true is not None else len(estimated)
    for i in range(n):
        yield (
            kind,
            i,
            None if true is None else float(true[i]),
            None if estimated is None else float(estimated[i]),
        )


def write_params_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PARAM_HEADER)
        for kind, index, true, est in rows:
            writer.writerow([kind, int(index), fmt(true), fmt(est)])


def read_params_csv(path) -> dict[str, dict[str, np.ndarray]]:
    """Return ``{kind: {"true": array, "estimated": array}}``; unknown values are NaN."""
    out: dict[str, dict[str, list]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PARAM_HEADER:
            raise InputError(path, f"expected header {','.join(PARAM_HEADER)}", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise InputError(path, f"expected 4 fields, found {len(row)}", lineno)
            kind, index, true, est = row
            try:
                idx = int(index)
            except ValueError:
                raise InputError(path, f"bad index {index!r}", lineno, "index") from None
            slot = out.setdefault(kind, {"index": [], "true": [], "estimated": []})
            slot["index"].append(idx)
            slot["true"].append(_parse_float(true, path, lineno, "true") if true else math.nan)
            slot["estimated"].append(
                _parse_float(est, path, lineno, "estimated") if est else math.nan
            )
    result = {}
    for kind, slot in out.items():
        order = np.argsort(slot["index"], kind="stable")
        if sorted(slot["index"]) != list(range(len(order))):
            raise InputError(path, f"indices for {kind!r} are not 0..n-1")
        result[kind] = {
            "true": np.array(slot["true"])[order],
            "estimated": np.array(slot["estimated"])[order],
        }
    return result


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    return obj


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_json_safe(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(path, exc.msg, exc.lineno) from None


class ConfigFile:
    """Thin wrapper over :mod:`configparser` that reports the line of a bad key."""

    def __init__(self, path):
        self.path = Path(path)
        self.parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            with open(self.path) as fh:
                text = fh.read()
            self.parser.read_string(text, source=str(self.path))
        except configparser.Error as exc:
            raise InputError(self.path, str(exc).splitlines()[0],
                             getattr(exc, "lineno", None)) from None
        self._lines = text.splitlines()

    def line_of(self, section: str, key: str) -> int | None:
        current = None
        for n, raw in enumerate(self._lines, start=1):
            s = raw.strip()
            if s.startswith("[") and s.endswith("]"):
                current = s[1:-1].strip()
            elif current == section and "=" in s:
                if s.split("=", 1)[0].strip().lower() == key.lower():
                    return n
        return None

    def sections(self) -> list[str]:
        return self.parser.sections()

    def has(self, section: str, key: str) -> bool:
        return self.parser.has_option(section, key)

    def error(self, section: str, key: str, message: str) -> InputError:
        return InputError(self.path, message, self.line_of(section, key), f"{section}.{key}")

    def get(self, section: str, key: str, conv=str, default=None, required: bool = False):
        if not self.parser.has_option(section, key):
            if required:
                raise InputError(self.path, "missing required key", None, f"{section}.{key}")
            return default
        raw = self.parser.get(section, key)
        try:
            return conv(raw)
        except (TypeError, ValueError) as exc:
            raise self.error(section, key, f"invalid value {raw!r} ({exc})") from None

    def unknown_keys(self, section: str, allowed) -> None:
        if not self.parser.has_section(section):
            return
        for key in self.parser.options(section):
            if key not in allowed:
                raise self.error(section, key, "unknown key")


def parse_bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def parse_pair(text: str) -> tuple[float, float]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError("expected two comma-separated numbers")
    return float(parts[0]), float(parts[1])


def parse_shapes(text: str) -> list[tuple[int, int]]:
    """``"100x20, 100x100"`` -> ``[(100, 20), (100, 100)]`` as (N items, M respondents)."""
    out = []
    for chunk in text.split(","):
        chunk = chunk.strip().lower()
        if not chunk:
            continue
        n_items, _, n_resp = chunk.partition("x")
        n, m = int(n_items), int(n_resp)
        if n < 1 or m < 1:
            raise ValueError("dataset shapes must be positive")
        out.append((n, m))
    if not out:
        raise ValueError("at least one dataset shape is required")
    return out
