"""Atomic file output for delimited tables and JSON documents."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np


def atomic_write(path, text: str) -> Path:
    """Write ``text`` to ``path`` via a temporary file in the same directory and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def _plain(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return None if math.isnan(v) or math.isinf(v) else v
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.ndarray):
        return [_plain(x) for x in v.tolist()]
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def to_json(obj) -> str:
    """JSON with numpy scalars converted and non-finite floats written as null."""
    return json.dumps(_plain(obj), indent=1, sort_keys=True)


def write_json(path, obj) -> Path:
    return atomic_write(path, to_json(obj) + "\n")


def rows_to_csv(rows: list[dict], columns: list[str] | None = None, delimiter=",") -> str:
    if columns is None:
        columns = list(dict.fromkeys(k for r in rows for k in r))
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow(["" if (v := _plain(r.get(c))) is None else v for c in columns])
    return buf.getvalue()


def write_table(stem, rows: list[dict], columns: list[str] | None = None, delimiter=",") -> tuple[Path, Path]:
    """Write ``rows`` as ``<stem>.csv`` and ``<stem>.json``."""
    stem = Path(stem)
    csv_path = atomic_write(stem.with_suffix(".csv"), rows_to_csv(rows, columns, delimiter))
    json_path = write_json(stem.with_suffix(".json"), rows)
    return csv_path, json_path
