"""Small file helpers: atomic writes and round-trip-exact CSV."""

from __future__ import annotations

import csv
import hashlib
import io
import os
from typing import Sequence

import numpy as np


def fmt_value(v) -> str:
    """Round-trip-exact text for CSV cells (repr for floats, '' for None)."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def atomic_write_text(path, text: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def atomic_write_bytes(path, payload: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_csv(path, header: Sequence[str], rows) -> None:
    """Write rows (sequences or dicts) atomically with exact float text."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(header))
    for row in rows:
        if isinstance(row, dict):
            writer.writerow([fmt_value(row.get(col)) for col in header])
        else:
            writer.writerow([fmt_value(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def read_csv_columns(path) -> dict:
    """Read a CSV into {column: numpy array}, floats where parseable."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        raw = {name: [] for name in header}
        for row in reader:
            for name, cell in zip(header, row):
                raw[name].append(cell)
    out = {}
    for name, cells in raw.items():
        try:
            out[name] = np.array(
                [float(c) if c != "" else np.nan for c in cells], dtype=float
            )
        except ValueError:
            out[name] = np.array(cells, dtype=object)
    return out


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
