"""Deterministic CSV and JSON writers with a schema header.

CSV files start with ``# schema_version=1 kind=<kind>``, then a header row.
Floats use 17 significant digits, negative zero is written as ``0`` and line
endings are LF. JSON files carry ``schema_version`` and ``kind`` keys and
are written with sorted keys.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import SCHEMA_VERSION


def format_value(v) -> str:
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
        if v == 0.0:
            return "0"
        return format(v, ".17g")
    return str(v)


def _json_clean(obj):
    if isinstance(obj, dict):
        return {str(k): _json_clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_json_clean(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            return None
        return 0.0 if v == 0.0 else v
    return obj


def write_csv(path: str | Path, kind: str, columns: Sequence[str], rows: Iterable) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema_version={SCHEMA_VERSION} kind={kind}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            if isinstance(row, dict):
                row = [row.get(c) for c in columns]
            writer.writerow([format_value(v) for v in row])
    return path


def write_json(path: str | Path, kind: str, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind, **_json_clean(payload)}
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1, allow_nan=False)
        fh.write("\n")
    return path


def write_table(out_dir: Path, name: str, fmt: str, columns: Sequence[str], rows) -> Path:
    """A table as ``name.csv`` or ``name.json`` (``{"columns": [...], "rows": [[...]]}``)."""
    if fmt == "csv":
        return write_csv(Path(out_dir) / f"{name}.csv", name, columns, rows)
    rows = [[r.get(c) for c in columns] if isinstance(r, dict) else list(r) for r in rows]
    return write_json(Path(out_dir) / f"{name}.json", name, {"columns": list(columns), "rows": rows})


def write_record(out_dir: Path, name: str, fmt: str, record: dict) -> Path:
    """A flat key-value record: one CSV row, or a JSON object."""
    if fmt == "csv":
        return write_csv(Path(out_dir) / f"{name}.csv", name, list(record), [record])
    return write_json(Path(out_dir) / f"{name}.json", name, {"record": record})


def read_csv(path: str | Path) -> tuple[dict, list, list]:
    """Parse a file written by :func:`write_csv` into (header meta, columns, rows of str)."""
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline()
        meta = dict(item.split("=", 1) for item in first.lstrip("# ").split())
        reader = csv.reader(fh)
        columns = next(reader)
        rows = list(reader)
    return meta, columns, rows
