"""Reading inputs and writing run artifacts (CSV and JSON).

Floats are written with ``repr`` (shortest round-trip form) so that files
produced from identical numbers are byte-identical.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, IoError, MissingArtifacts
from .model import DesignMatrices, ObservationSet

ID_COLUMN = "id"


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return "" if math.isnan(v) else repr(v)
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None


def read_csv(path) -> Tuple[List[str], List[List[str]]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise IoError(f"{path} is empty")
    return rows[0], rows[1:]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, obj) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(_jsonable(obj), fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise IoError(f"{path} is not valid JSON: {exc}") from None


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{what} file not found: {path}")
    return path


def ensure_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {path}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise IoError(f"output directory {path} is not writable")
    return path


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------


def _float_cell(cell: str, path, line: int) -> float:
    try:
        return float(cell)
    except ValueError:
        raise IoError(f"{path}:{line}: not a number: {cell!r}") from None


def read_observations(path, id_col: str = ID_COLUMN, time_col: str = "time",
                      y_col: str = "y") -> ObservationSet:
    """Long-format observations, one row per measurement.

    Individuals appear in order of first occurrence; rows of one individual
    need not be contiguous or sorted in time.
    """
    header, rows = read_csv(path)
    try:
        ci, ct, cy = header.index(id_col), header.index(time_col), header.index(y_col)
    except ValueError:
        raise IoError(f"{path} needs columns {id_col!r}, {time_col!r}, {y_col!r}") from None
    order: List[str] = []
    data = {}
    for line, row in enumerate(rows, start=2):
        if not row:
            continue
        key = row[ci]
        if key not in data:
            order.append(key)
            data[key] = ([], [])
        data[key][0].append(_float_cell(row[cy], path, line))
        data[key][1].append(_float_cell(row[ct], path, line))
    if not order:
        raise IoError(f"{path} has no observations")
    return ObservationSet.from_lists([data[k][0] for k in order], [data[k][1] for k in order], order)


def read_covariates(path, ids: Sequence[str], forced: Sequence[str] = (),
                    id_col: str = ID_COLUMN) -> DesignMatrices:
    """Wide covariate table (one row per individual), reordered to ``ids``.

    Columns named in ``forced`` become always-included adjustment covariates;
    every other non-id column is selectable.
    """
    header, rows = read_csv(path)
    if id_col not in header:
        raise IoError(f"{path} needs an {id_col!r} column")
    ci = header.index(id_col)
    missing = [c for c in forced if c not in header]
    if missing:
        raise ConfigError(f"forced covariates not in {path}: {missing}")
    names = [h for j, h in enumerate(header) if j != ci and h not in forced]
    cols = [header.index(h) for h in names]
    fcols = [header.index(h) for h in forced]
    by_id = {}
    for line, row in enumerate(rows, start=2):
        if row:
            by_id[row[ci]] = ([_float_cell(row[j], path, line) for j in cols],
                              [_float_cell(row[j], path, line) for j in fcols])
    absent = [i for i in ids if str(i) not in by_id]
    if absent:
        raise IoError(f"{path} lacks covariates for individuals {absent[:5]}")
    V = np.array([by_id[str(i)][0] for i in ids], float).reshape(len(ids), len(names))
    F = np.array([by_id[str(i)][1] for i in ids], float).reshape(len(ids), len(forced)) \
        if forced else None
    return DesignMatrices.from_raw(V, F, names=names, forced_names=list(forced))


def write_observations(path, obs: ObservationSet) -> None:
    rows = []
    for i in range(obs.n):
        y, t = obs.individual(i)
        rows.extend((obs.ids[i], tt, yy) for tt, yy in zip(t, y))
    write_csv(path, (ID_COLUMN, "time", "y"), rows)


def write_covariates(path, ids: Sequence, V, names: Optional[Sequence[str]] = None) -> None:
    V = np.asarray(V, float)
    names = list(names) if names else [f"V{j + 1}" for j in range(V.shape[1])]
    write_csv(path, [ID_COLUMN] + names, ([i] + list(row) for i, row in zip(ids, V)))


def require_artifacts(run_dir, names: Sequence[str]) -> Path:
    run_dir = Path(run_dir)
    missing = [n for n in names if not (run_dir / n).is_file()]
    if missing:
        raise MissingArtifacts(f"{run_dir} lacks {missing}; run 'select' or 'map' first")
    return run_dir
