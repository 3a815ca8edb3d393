"""Lossless CSV emission: fixed header, '.' decimals, 17 significant digits."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return "%.17g" % v


def to_csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    return buf.getvalue()


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.write_text(to_csv_text(header, rows), encoding="utf-8")
    return path


def read_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Header and a float array of the body, for round-trip checks."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    body = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    return rows[0], body.reshape(len(rows) - 1, len(rows[0]))


def field_header(d: int) -> list[str]:
    return ["index", *(f"x{i}" for i in range(d)), "value"]
