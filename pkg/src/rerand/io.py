"""File formats: covariate ingestion, assignment export, reports.

All numeric output is written with 17 significant digits so files round-trip
to the exact binary values.
"""

from __future__ import annotations

import csv
import json
from typing import Optional

import numpy as np

from .core import CovariateMatrix
from .errors import ConfigError, EmptyFile, MixedType, ParseError
from .simharness import BenchRow

RESERVED_COLUMNS = ("stratum", "cluster")


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def parse_covariates(path) -> tuple[CovariateMatrix, dict]:
    """Covariate matrix plus structure labels from a headed CSV.

    Numeric columns are covariates; the reserved columns ``stratum`` and
    ``cluster`` carry structure labels, mapped to index groups in first-
    appearance order. Returns (matrix, labels) with labels a dict holding
    ``stratum`` / ``cluster`` group lists when present.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    if not rows:
        raise EmptyFile(f"{path}: no content")
    header = [h.strip() for h in rows[0]]
    data_rows = rows[1:]
    if not data_rows:
        raise EmptyFile(f"{path}: header only, no data rows")
    n_cols = len(header)
    for i, row in enumerate(data_rows):
        if len(row) != n_cols:
            raise ParseError(
                f"{path}: row {i + 2} has {len(row)} cells, expected {n_cols}",
                line=i + 2,
            )
    label_cols = {}
    numeric_cols = []
    for j, name in enumerate(header):
        if name in RESERVED_COLUMNS:
            label_cols[name] = j
        else:
            numeric_cols.append(j)
    if not numeric_cols:
        raise ParseError(f"{path}: no covariate columns found", line=1)
    values = np.empty((len(data_rows), len(numeric_cols)), dtype=np.float64)
    for out_j, j in enumerate(numeric_cols):
        seen_numeric = False
        bad: Optional[tuple[int, str]] = None
        for i, row in enumerate(data_rows):
            cell = row[j].strip()
            try:
                values[i, out_j] = float(cell)
                seen_numeric = True
            except ValueError:
                if bad is None:
                    bad = (i + 2, cell)
                values[i, out_j] = np.nan
        if bad is not None:
            line, cell = bad
            if seen_numeric:
                raise MixedType(
                    f"{path}: column {header[j]!r} mixes numeric and non-numeric "
                    f"cells (first offender {cell!r} at line {line})",
                    line=line,
                    column=header[j],
                )
            raise ParseError(
                f"{path}: non-numeric cell {cell!r} in covariate column "
                f"{header[j]!r} at line {line}",
                line=line,
                column=header[j],
            )
    labels = {}
    for name, j in label_cols.items():
        groups: dict[str, list[int]] = {}
        order = []
        for i, row in enumerate(data_rows):
            key = row[j].strip()
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append(i)
        labels[name] = [tuple(groups[k]) for k in order]
    return CovariateMatrix(values), labels


def parse_outcomes(path) -> np.ndarray:
    """Outcome vector from a CSV with a column named ``y``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    if not rows:
        raise EmptyFile(f"{path}: no content")
    header = [h.strip() for h in rows[0]]
    if "y" not in header:
        raise ParseError(f"{path}: outcomes file needs a column named 'y'", line=1)
    j = header.index("y")
    out = np.empty(len(rows) - 1, dtype=np.float64)
    for i, row in enumerate(rows[1:]):
        try:
            out[i] = float(row[j].strip())
        except (ValueError, IndexError):
            raise ParseError(
                f"{path}: bad outcome value at line {i + 2}", line=i + 2, column="y"
            ) from None
    return out


def write_assignment_csv(path, assignment) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit", "assignment"])
        for i, w in enumerate(np.asarray(assignment)):
            writer.writerow([i, int(w)])


def read_assignment_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    if not rows:
        raise EmptyFile(f"{path}: no content")
    header = [h.strip() for h in rows[0]]
    try:
        ui, wi = header.index("unit"), header.index("assignment")
    except ValueError:
        raise ParseError(f"{path}: expected 'unit,assignment' header", line=1) from None
    pairs = []
    for i, row in enumerate(rows[1:]):
        try:
            pairs.append((int(row[ui]), int(row[wi])))
        except (ValueError, IndexError):
            raise ParseError(f"{path}: bad row at line {i + 2}", line=i + 2) from None
    pairs.sort()
    w = np.array([v for _, v in pairs], dtype=np.int8)
    if not np.all((w == 0) | (w == 1)):
        raise ParseError(f"{path}: assignment values must be 0/1")
    return w


def write_draws_csv(path, draws) -> None:
    """B assignment columns plus a final row of their imbalance values."""
    mats = np.asarray([d.assignment for d in draws])
    ms = [d.m_value for d in draws]
    b, n = mats.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit"] + [f"draw_{j + 1}" for j in range(b)])
        for i in range(n):
            writer.writerow([i] + [int(v) for v in mats[:, i]])
        writer.writerow(["M"] + [_fmt(m) for m in ms])


def write_inference_json(path, report, extra: Optional[dict] = None) -> None:
    payload = {
        "tau_hat": report.tau_hat,
        "p_value": report.p_value,
        "ci": [report.ci[0], report.ci[1]],
        "alpha": report.alpha,
        "B": report.draws_used,
        "L_n": report.l_n,
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


BENCH_COLUMNS = [
    "Method",
    "Bias",
    "SD",
    "Size",
    "Power",
    "Coverage",
    "Length",
    "Run Time (second)",
    "L_n",
]

# statistical columns are printed in units of 1e-3, mirroring the tables
_SCALED_FIELDS = ("bias", "sd", "size", "power", "coverage", "length")


def write_bench_csv(path, rows: list[BenchRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BENCH_COLUMNS)
        for row in rows:
            writer.writerow(
                [row.method]
                + [_fmt(getattr(row, f) * 1e3) for f in _SCALED_FIELDS]
                + [_fmt(row.run_time_seconds), _fmt(row.l_n)]
            )


def load_structure_labels(path) -> dict:
    """Structure labels from a CSV holding only reserved columns."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    if not rows:
        raise EmptyFile(f"{path}: no content")
    header = [h.strip() for h in rows[0]]
    labels = {}
    for name in RESERVED_COLUMNS:
        if name not in header:
            continue
        j = header.index(name)
        groups: dict[str, list[int]] = {}
        order = []
        for i, row in enumerate(rows[1:]):
            key = row[j].strip()
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append(i)
        labels[name] = [tuple(groups[k]) for k in order]
    if not labels:
        raise ConfigError(f"{path}: no 'stratum' or 'cluster' column present")
    return labels
