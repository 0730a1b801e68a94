"""Unit-level survey data for the nested error regression model.

A dataset holds the sampled units ``(y_ij, x_ij)`` and, per area, the
population size ``N_i`` and population covariate mean ``Xbar_i``.  The
intercept column is never stored on disk; loaders prepend it, so a file
with covariate columns ``x1..xk`` yields ``p = k + 1``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

UNITS_SCHEMA = "nersae.units/1"
AREAS_SCHEMA = "nersae.areas/1"


class DatasetError(ValueError):
    """Validation failure while building or loading a dataset.

    All problems found in one pass are collected in ``errors``.
    """

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class UnitRecord:
    area_id: int
    unit_id: int
    y: float
    x: tuple


@dataclass(frozen=True)
class AreaInfo:
    area_id: int
    N: int
    n: int
    xbar: tuple


@dataclass(frozen=True)
class PredictandSet:
    theta: np.ndarray
    ybar: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.ybar is not None and len(self.ybar) != len(self.theta):
            raise ValueError("theta and ybar must have the same length")


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SurveyDataset:
    """Sampled units plus area-level population facts.

    Arrays are read-only.  ``area`` holds 0-based area positions, so
    ``area_id == area + 1``.
    """

    y: np.ndarray
    X: np.ndarray
    area: np.ndarray
    unit_id: np.ndarray
    N: np.ndarray
    xbar: np.ndarray
    n_i: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "y", _frozen(self.y))
        object.__setattr__(self, "X", _frozen(np.atleast_2d(self.X)))
        object.__setattr__(self, "area", _frozen(self.area, np.int64))
        object.__setattr__(self, "unit_id", _frozen(self.unit_id, np.int64))
        object.__setattr__(self, "N", _frozen(self.N, np.int64))
        object.__setattr__(self, "xbar", _frozen(np.atleast_2d(self.xbar)))
        errors = []
        n, m = len(self.y), len(self.N)
        if self.X.shape[0] != n or len(self.area) != n or len(self.unit_id) != n:
            errors.append("unit arrays have inconsistent lengths")
        if self.xbar.shape[0] != m:
            errors.append("xbar must have one row per area")
        if self.X.shape[1] != self.xbar.shape[1]:
            errors.append(
                f"covariate dimension mismatch: units p={self.X.shape[1]}, "
                f"areas p={self.xbar.shape[1]}"
            )
        if n and (self.area.min() < 0 or self.area.max() >= m):
            errors.append("unit area index out of range")
        if not np.all(np.isfinite(self.y)):
            errors.append("non-finite response values")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.xbar))):
            errors.append("non-finite covariate values")
        if errors:
            raise DatasetError(errors)
        n_i = np.bincount(self.area, minlength=m)
        bad = np.flatnonzero(n_i > self.N)
        if bad.size:
            raise DatasetError(
                [f"area {i + 1}: n_i={n_i[i]} exceeds N={self.N[i]}" for i in bad]
            )
        object.__setattr__(self, "n_i", _frozen(n_i, np.int64))

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def m(self) -> int:
        return len(self.N)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def records(self) -> list:
        return [
            UnitRecord(int(a) + 1, int(u), float(y), tuple(float(v) for v in x))
            for a, u, y, x in zip(self.area, self.unit_id, self.y, self.X)
        ]

    @property
    def areas(self) -> list:
        return [
            AreaInfo(i + 1, int(self.N[i]), int(self.n_i[i]), tuple(map(float, self.xbar[i])))
            for i in range(self.m)
        ]

    def area_sum(self, values) -> np.ndarray:
        return np.bincount(self.area, weights=values, minlength=self.m)

    def sample_xbar(self) -> np.ndarray:
        """Per-area sample covariate means (rows of zeros for empty areas)."""
        tot = np.zeros((self.m, self.p))
        np.add.at(tot, self.area, self.X)
        return tot / np.maximum(self.n_i, 1)[:, None]

    def with_y(self, y) -> "SurveyDataset":
        return SurveyDataset(y, self.X, self.area, self.unit_id, self.N, self.xbar)

    def drop_units(self, mask) -> "SurveyDataset":
        """Dataset without the units where ``mask`` is true."""
        keep = ~np.asarray(mask, bool)
        return SurveyDataset(
            self.y[keep], self.X[keep], self.area[keep], self.unit_id[keep], self.N, self.xbar
        )

    def require_areas(self, minimum: int = 3) -> None:
        if self.m < minimum:
            raise DatasetError([f"at least {minimum} areas are required, got m={self.m}"])


def residual(record: UnitRecord, beta, v) -> float:
    """Linear residual ``y - x'beta - v_area`` of one unit."""
    beta = np.asarray(beta, float)
    v = np.asarray(v, float)
    if beta.shape != (len(record.x),):
        raise ValueError(f"beta has length {beta.size}, expected {len(record.x)}")
    if not 1 <= record.area_id <= v.size:
        raise ValueError(f"area_id {record.area_id} outside 1..{v.size}")
    return record.y - float(np.dot(record.x, beta)) - float(v[record.area_id - 1])


def theta(area: AreaInfo, beta, v_i: float) -> float:
    """Area mean approximation ``Xbar_i' beta + v_i``."""
    beta = np.asarray(beta, float)
    if beta.shape != (len(area.xbar),):
        raise ValueError(f"beta has length {beta.size}, expected {len(area.xbar)}")
    return float(np.dot(area.xbar, beta)) + float(v_i)


def compose_area_mean(area: AreaInfo, sampled_sum: float, unsampled_draws) -> float:
    """Finite-population mean from the sampled total and unsampled values.

    Summation is exactly rounded, so the result does not depend on the order
    of ``unsampled_draws``.
    """
    draws = np.asarray(unsampled_draws, float).ravel()
    if draws.size != area.N - area.n:
        raise ValueError(
            f"expected {area.N - area.n} unsampled draws for area {area.area_id}, got {draws.size}"
        )
    return math.fsum([float(sampled_sum), *draws.tolist()]) / area.N


# ---------------------------------------------------------------------------
# CSV ingestion


def _read_csv(path) -> tuple[Optional[str], list[str], list[list[str]]]:
    schema = None
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            if schema is None and "schema:" in line:
                schema = line.split("schema:", 1)[1].split()[0]
            continue
        if line.strip():
            body.append(line)
    rows = list(csv.reader(body))
    if not rows:
        return schema, [], []
    return schema, [h.strip() for h in rows[0]], rows[1:]


def _covariate_columns(header, prefix, fixed, errors, label):
    k = len(header) - len(fixed)
    if header[: len(fixed)] != fixed:
        errors.append(f"{label}: header must start with {','.join(fixed)}")
        return 0
    expected = [f"{prefix}{j}" for j in range(1, k + 1)]
    if header[len(fixed):] != expected:
        errors.append(f"{label}: covariate columns must be {','.join(expected) or '(none)'}")
    return k


def _parse_row(row, width, line, label, errors, ints=()):
    if len(row) != width:
        errors.append(f"{label} row {line}: expected {width} fields, got {len(row)}")
        return None
    out = []
    for j, cell in enumerate(row):
        try:
            val = float(cell)
        except ValueError:
            errors.append(f"{label} row {line}: non-numeric field {cell!r}")
            return None
        if j in ints:
            if val != int(val):
                errors.append(f"{label} row {line}: expected an integer, got {cell!r}")
                return None
            val = int(val)
        elif not math.isfinite(val):
            errors.append(f"{label} row {line}: non-finite value {cell!r}")
            return None
        out.append(val)
    return out


def load_dataset(unit_csv, area_csv) -> SurveyDataset:
    """Read and validate a unit CSV and an area CSV.

    Unit columns: ``area_id,unit_id,y,x1,...``; area columns:
    ``area_id,N,xbar1,...``.  Every problem is reported in a single
    :class:`DatasetError`.
    """
    errors: list[str] = []
    u_schema, u_head, u_rows = _read_csv(unit_csv)
    a_schema, a_head, a_rows = _read_csv(area_csv)
    if u_schema not in (None, UNITS_SCHEMA):
        errors.append(f"units: unsupported schema {u_schema!r}")
    if a_schema not in (None, AREAS_SCHEMA):
        errors.append(f"areas: unsupported schema {a_schema!r}")
    ku = _covariate_columns(u_head, "x", ["area_id", "unit_id", "y"], errors, "units")
    ka = _covariate_columns(a_head, "xbar", ["area_id", "N"], errors, "areas")
    if not errors and ku != ka:
        errors.append(f"units have {ku} covariates but areas have {ka}")
    if errors:
        raise DatasetError(errors)

    areas = {}
    for line, row in enumerate(a_rows, start=2):
        vals = _parse_row(row, 2 + ka, line, "areas", errors, ints=(0, 1))
        if vals is None:
            continue
        aid, N = vals[0], vals[1]
        if aid in areas:
            errors.append(f"areas row {line}: duplicate area_id {aid}")
        if N < 1:
            errors.append(f"areas row {line}: N must be positive")
        areas[aid] = (N, vals[2:])
    m = len(areas)
    if areas and sorted(areas) != list(range(1, m + 1)):
        errors.append(f"area ids must be exactly 1..{m}")

    units = []
    for line, row in enumerate(u_rows, start=2):
        vals = _parse_row(row, 3 + ku, line, "units", errors, ints=(0, 1))
        if vals is None:
            continue
        if vals[0] not in areas:
            errors.append(f"units row {line}: area_id {vals[0]} not present in area file")
            continue
        units.append(vals)
    if not units and not errors:
        errors.append("units: no records")
    if errors:
        raise DatasetError(errors)

    u = np.array(units, float)
    ids = sorted(areas)
    n_file = np.array([areas[i][0] for i in ids])
    xbar = np.array([[1.0, *areas[i][1]] for i in ids])
    X = np.column_stack([np.ones(len(u)), u[:, 3:]])
    return SurveyDataset(u[:, 2], X, u[:, 0].astype(int) - 1, u[:, 1].astype(int), n_file, xbar)


def save_dataset(data: SurveyDataset, unit_csv, area_csv) -> None:
    """Write ``data`` in the CSV schema read by :func:`load_dataset`."""
    k = data.p - 1
    with open(unit_csv, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema: {UNITS_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area_id", "unit_id", "y", *[f"x{j}" for j in range(1, k + 1)]])
        for a, uid, y, x in zip(data.area, data.unit_id, data.y, data.X):
            w.writerow([int(a) + 1, int(uid), repr(float(y)), *[repr(float(v)) for v in x[1:]]])
    with open(area_csv, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema: {AREAS_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area_id", "N", *[f"xbar{j}" for j in range(1, k + 1)]])
        for i in range(data.m):
            w.writerow([i + 1, int(data.N[i]), *[repr(float(v)) for v in data.xbar[i, 1:]]])


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("nersae") / "fixtures" / name))


#: (area_id, unit_id) of the suspected outlier in the corn data (Hardin county)
CORN_OUTLIER = (12, 2)


def load_corn(reduced: bool = False) -> SurveyDataset:
    """The 12-county corn data; ``reduced`` drops the suspected outlier."""
    data = load_dataset(fixture_path("corn_units.csv"), fixture_path("corn_areas.csv"))
    if reduced:
        data = data.drop_units(
            (data.area == CORN_OUTLIER[0] - 1) & (data.unit_id == CORN_OUTLIER[1])
        )
    return data


def design_check(data: SurveyDataset) -> None:
    """Raise if the design is rank deficient or leaves no residual d.o.f."""
    if data.n <= data.p:
        raise DatasetError([f"insufficient degrees of freedom: n={data.n} <= p={data.p}"])
    if np.linalg.matrix_rank(data.X) < data.p:
        raise DatasetError(["collinear covariates: design matrix is rank deficient"])
