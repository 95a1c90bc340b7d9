"""Atomic writers for run outputs, plus readers used by tests and tooling."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np


def atomic_write_bytes(path, data: bytes):
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str):
    return atomic_write_bytes(path, text.encode("utf-8"))


def format_float(v) -> str:
    """Shortest repr that round-trips, so identical runs give identical bytes."""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def write_trace_csv(path, rows, columns):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_float(row[c]) for c in columns])
    return atomic_write_text(path, buf.getvalue())


def read_trace_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_json(path, obj):
    return atomic_write_text(path, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_npz(path, **arrays):
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return atomic_write_bytes(path, buf.getvalue())


def emit_contours(density, grid, path):
    """Evaluate ``density`` on every grid point and write ``x\\ty\\tdensity`` rows.

    Rows follow the grid's x-major order, which is strictly increasing in (x, y).
    """
    pts = grid.points()
    values = np.asarray(density(pts), dtype=np.float64)
    if values.shape != (pts.shape[0],):
        raise ValueError("density evaluator must return one value per grid point")
    lines = ["x\ty\tdensity"]
    lines += [f"{x!r}\t{y!r}\t{d!r}" for x, y, d in zip(pts[:, 0].tolist(), pts[:, 1].tolist(),
                                                        values.tolist())]
    return atomic_write_text(path, "\n".join(lines) + "\n")


def read_contours(path):
    data = np.loadtxt(path, delimiter="\t", skiprows=1, ndmin=2)
    return data[:, :2], data[:, 2]
