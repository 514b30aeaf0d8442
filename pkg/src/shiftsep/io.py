"""Plain-text file formats.

* Matrices: CSV without header, one row per line, ``.`` decimal separator.
* Sensor geometry: CSV with header ``id,x,y``; row order matches the rows of V.
* Reports: JSON with sorted keys so reruns diff cleanly.
"""

import csv
import json
import math
from pathlib import Path

import numpy as np

from .exceptions import SchemaError
from .signal_model import SensorArray


def _fmt(x):
    return repr(float(x))


def write_matrix(path, A):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in A:
            w.writerow([_fmt(x) for x in row])


def _parse_float(path, text, row, col):
    try:
        value = float(text)
    except ValueError:
        raise SchemaError(path, f"not a number: {text!r}", row=row, column=col) from None
    if not math.isfinite(value):
        raise SchemaError(path, f"non-finite value {text!r}", row=row, column=col)
    return value


def read_matrix(path, name=None):
    """Read a headerless numeric CSV; rows and columns in errors are 1-based."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    rows = []
    with open(path, newline="") as fh:
        for r, line in enumerate(csv.reader(fh), start=1):
            if not line:
                continue
            rows.append([_parse_float(path, cell.strip(), r, c) for c, cell in enumerate(line, start=1)])
            if len(rows[-1]) != len(rows[0]):
                raise SchemaError(path, f"expected {len(rows[0])} columns, found {len(rows[-1])}", row=r)
    if not rows:
        raise SchemaError(path, "file is empty")
    return np.array(rows, dtype=float)


def write_sensors(path, array):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y"])
        for sid, (x, y) in zip(array.ids, array.coordinates):
            w.writerow([sid, _fmt(x), _fmt(y)])


def read_sensors(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "x", "y"]:
            raise SchemaError(path, f"header must be 'id,x,y', found {header!r}", row=1)
        ids, xy = [], []
        for r, line in enumerate(reader, start=2):
            if not line:
                continue
            if len(line) != 3:
                raise SchemaError(path, f"expected 3 columns, found {len(line)}", row=r)
            ids.append(line[0].strip())
            xy.append([_parse_float(path, line[c].strip(), r, c + 1) for c in (1, 2)])
    if len(xy) < 2:
        raise SchemaError(path, "need at least 2 sensors")
    return SensorArray(np.array(xy), ids=ids)


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) if isinstance(x, (float, np.floating)) else x for x in row])


def read_table(path):
    """Read a CSV with a header into ``(header, float ndarray)``."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise SchemaError(path, "missing header", row=1)
        rows = []
        for r, line in enumerate(reader, start=2):
            if not line:
                continue
            if len(line) != len(header):
                raise SchemaError(path, f"expected {len(header)} columns, found {len(line)}", row=r)
            rows.append([_parse_float(path, cell.strip(), r, c) for c, cell in enumerate(line, start=1)])
    return header, np.array(rows, dtype=float).reshape(-1, len(header))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    path = Path(path)
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(path, f"invalid JSON: {exc.msg}", row=exc.lineno, column=exc.colno) from None
