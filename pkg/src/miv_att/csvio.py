"""CSV ingestion and emission for datasets and summary tables."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np

from .data import Dataset

REQUIRED = ("y", "a", "z")


class CsvSchemaError(ValueError):
    """The CSV file does not match the dataset schema."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def fmt(v) -> str:
    """Shortest text that parses back to exactly the same float."""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


def read_dataset(path) -> Dataset:
    """Read a dataset CSV with required ``y, a, z`` columns; other columns are covariates.

    Column names ``y``, ``a`` and ``z`` are matched case-insensitively; the
    covariate order of the file is preserved.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CsvSchemaError([f"cannot read {path}: {exc.strerror}"]) from None
    except UnicodeDecodeError:
        raise CsvSchemaError([f"{path} is not UTF-8 text"]) from None
    return parse_dataset(text)


def parse_dataset(text: str) -> Dataset:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise CsvSchemaError(["missing header row"])
    header = [h.strip() for h in rows[0]]
    lower = [h.lower() for h in header]
    problems = []
    for name in REQUIRED:
        if lower.count(name) == 0:
            problems.append(f"missing required column '{name}'")
        elif lower.count(name) > 1:
            problems.append(f"duplicate column '{name}'")
    if problems:
        raise CsvSchemaError(problems)
    body = rows[1:]
    values = np.empty((len(body), len(header)))
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            problems.append(f"row {i}: expected {len(header)} cells, found {len(row)}")
            continue
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell == "":
                problems.append(f"row {i}, column '{header[j]}': missing value")
                continue
            try:
                values[i - 2, j] = float(cell)
            except ValueError:
                problems.append(f"row {i}, column '{header[j]}': non-numeric value {cell!r}")
    for name in ("a", "z"):
        j = lower.index(name)
        if not problems:
            bad = np.flatnonzero(~np.isin(values[:, j], (0.0, 1.0)))
            for i in bad[:10]:
                problems.append(f"row {i + 2}, column '{header[j]}': value must be 0 or 1")
    if problems:
        raise CsvSchemaError(problems[:50])
    cols = {name: values[:, lower.index(name)] for name in REQUIRED}
    cov = [j for j, h in enumerate(lower) if h not in REQUIRED]
    x = values[:, cov] if cov else np.zeros((len(body), 0))
    return Dataset(cols["y"], cols["a"], cols["z"], x, tuple(header[j] for j in cov))


def dataset_to_csv(dataset: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["y", "a", "z", *dataset.covariate_names])
    for i in range(dataset.n):
        w.writerow(
            [fmt(dataset.y[i]), str(int(dataset.a[i])), str(int(dataset.z[i]))]
            + [fmt(v) for v in dataset.x[i]]
        )
    return buf.getvalue()


def write_dataset(dataset: Dataset, path) -> None:
    Path(path).write_text(dataset_to_csv(dataset), encoding="utf-8")


SUMMARY_COLUMNS = ("estimator", "N", "replicates", "bias", "ase", "ese", "coverage", "failures")


def summary_to_csv(rows) -> str:
    """``rows`` are :class:`~miv_att.simulation.EstimatorSummary` objects."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([r.estimator, r.n, r.replicates, fmt(r.bias), fmt(r.ase), fmt(r.ese), fmt(r.coverage), r.failures])
    return buf.getvalue()
