"""Delimited-text readers and writers used by the command-line interface.

Floats are written with 17 significant digits so they round-trip exactly.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .exceptions import DomainError
from .mcmc import Trace
from .model import SCALAR_PARAMS, Dataset, ModelState


class InputError(DomainError):
    """Malformed or missing input file."""


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return f"{float(x):.17g}"


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return path


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def read_table(path, required=None) -> dict:
    """Read a headed numeric CSV into a dict of float arrays (columns in file order).

    Non-numeric cells raise :class:`InputError` naming the 1-based line.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"input file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in (required or ()) if c not in header]
    if missing:
        raise InputError(f"{path}: missing column(s) {', '.join(missing)} in header")
    cols = {h: [] for h in header}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise InputError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
        for h, cell in zip(header, row):
            try:
                cols[h].append(float(cell))
            except ValueError:
                raise InputError(f"{path}: line {lineno}: non-numeric value {cell.strip()!r} "
                                 f"in column {h!r}") from None
    return {h: np.array(v, dtype=float) for h, v in cols.items()}


def ingest_observations(path, log_transform: bool = False) -> Dataset:
    """Read ``x,y,value`` observations; ``log_transform`` takes natural logs of raw values."""
    t = read_table(path, required=("x", "y", "value"))
    values = t["value"]
    if log_transform:
        bad = np.flatnonzero(~(values > 0))
        if bad.size:
            raise InputError(f"{path}: line {bad[0] + 2}: concentration must be positive "
                             f"for --log-transform, got {values[bad[0]]!r}")
        values = np.log(values)
    for name, arr in (("x", t["x"]), ("y", t["y"]), ("value", values)):
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise InputError(f"{path}: line {bad[0] + 2}: non-finite {name}")
    if values.size == 0:
        raise InputError(f"{path}: no observations")
    return Dataset(np.column_stack([t["x"], t["y"]]), values)


def write_observations(path, data: Dataset) -> Path:
    return write_csv(path, ["x", "y", "value"],
                     ([s[0], s[1], v] for s, v in zip(data.sites, data.values)))


def trace_header(n_sites: int) -> list:
    return (["iteration", "log_post", *SCALAR_PARAMS]
            + [f"psi_x_{i}" for i in range(n_sites)] + [f"psi_y_{i}" for i in range(n_sites)])


def write_trace(path, trace: Trace) -> Path:
    n = trace.samples[0].n if len(trace) else 0
    rows = ([it, lp, *(getattr(s, p) for p in SCALAR_PARAMS), *s.psi_x, *s.psi_y]
            for it, lp, s in zip(trace.iterations, trace.log_posts, trace.samples))
    return write_csv(path, trace_header(n), rows)


def read_trace(path) -> Trace:
    t = read_table(path, required=("iteration", "log_post", *SCALAR_PARAMS))
    n = sum(1 for h in t if h.startswith("psi_x_"))
    if set(t) != set(trace_header(n)):
        raise InputError(f"{path}: unexpected trace columns")
    px = np.column_stack([t[f"psi_x_{i}"] for i in range(n)]) if n else np.zeros((len(t["mu"]), 0))
    py = np.column_stack([t[f"psi_y_{i}"] for i in range(n)]) if n else np.zeros((len(t["mu"]), 0))
    samples = [ModelState(*(float(t[p][k]) for p in SCALAR_PARAMS), psi_x=px[k], psi_y=py[k])
               for k in range(len(t["mu"]))]
    return Trace(samples, t["log_post"], t["iteration"].astype(int), {}, {}, None, {})


def ellipse_rows(ellipses, n_boundary: int):
    from .geometry import ellipse_boundary

    for e in ellipses:
        for k, (bx, by) in enumerate(ellipse_boundary(e, n_boundary)):
            yield [e.center[0], e.center[1], k, bx, by]


ELLIPSE_HEADER = ["site_x", "site_y", "index", "bx", "by"]


def finite_or_none(x):
    return x if isinstance(x, float) and math.isfinite(x) else None
