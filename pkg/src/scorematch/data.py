"""Datasets, neighbour graphs and CSV ingestion.

All regression models in this package are fixed-design: the covariate
matrix is treated as known constants, only responses are random.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np


class IngestionError(ValueError):
    """CSV ingestion failure; message lists the offending lines."""


@dataclass
class Dataset:
    """Response matrix plus fixed-design covariates.

    ``responses`` is (n, d); ``covariates`` is (n, p) and may be empty
    (n, 0) for models without covariates.
    """

    responses: np.ndarray
    covariates: np.ndarray
    response_names: list[str] = field(default_factory=list)
    covariate_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.responses = np.atleast_2d(np.asarray(self.responses, dtype=float))
        if self.responses.shape[0] == 1 and self.responses.shape[1] > 1 and not self.response_names:
            pass  # single-row data stays as given
        self.covariates = np.asarray(self.covariates, dtype=float)
        if self.covariates.ndim == 1:
            self.covariates = self.covariates.reshape(-1, 1)
        if self.covariates.size == 0:
            self.covariates = self.covariates.reshape(self.responses.shape[0], 0)
        if self.covariates.shape[0] != self.responses.shape[0]:
            raise ValueError("responses and covariates row counts differ")
        if not self.response_names:
            self.response_names = [f"y{j + 1}" for j in range(self.responses.shape[1])]
        if not self.covariate_names:
            self.covariate_names = [f"x{j + 1}" for j in range(self.covariates.shape[1])]

    @property
    def n(self) -> int:
        return self.responses.shape[0]

    @property
    def d(self) -> int:
        return self.responses.shape[1]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]


@dataclass
class NeighborGraph:
    """Symmetric adjacency over observation sites, no self loops."""

    n: int
    neighbors: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.neighbors) != self.n:
            raise ValueError("neighbor list length must equal n")
        self.neighbors = [np.asarray(sorted(set(int(k) for k in nb)), dtype=int)
                          for nb in self.neighbors]
        for i, nb in enumerate(self.neighbors):
            if np.any(nb < 0) or np.any(nb >= self.n):
                raise ValueError(f"site {i} has out-of-range neighbours")
            if i in nb:
                raise ValueError(f"site {i} has a self loop")
            for k in nb:
                if i not in self.neighbors[k]:
                    raise ValueError(f"adjacency not symmetric at ({i}, {k})")
        src, dst = [], []
        for i, nb in enumerate(self.neighbors):
            src.extend([i] * len(nb))
            dst.extend(nb.tolist())
        self._src = np.asarray(src, dtype=int)
        self._dst = np.asarray(dst, dtype=int)

    @property
    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Directed edge list (each undirected edge appears both ways)."""
        return self._src, self._dst

    def degree(self, i: int) -> int:
        return len(self.neighbors[i])

    def neighbor_sums(self, values: np.ndarray) -> np.ndarray:
        """Row i of the result is the sum of ``values`` over i's neighbours."""
        values = np.atleast_2d(np.asarray(values, dtype=float))
        out = np.zeros_like(values)
        np.add.at(out, self._src, values[self._dst])
        return out


def build_grid_neighbors(grid_coords: np.ndarray) -> NeighborGraph:
    """Queen (8-neighbour) adjacency: sites adjacent iff Chebyshev distance 1."""
    coords = np.asarray(grid_coords, dtype=int)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError("grid coordinates must be (n, 2) integer pairs")
    n = coords.shape[0]
    index = {}
    for i, (r, c) in enumerate(coords):
        key = (int(r), int(c))
        if key in index:
            raise ValueError(f"duplicate grid coordinate {key}")
        index[key] = i
    neighbors: list[list[int]] = [[] for _ in range(n)]
    for i, (r, c) in enumerate(coords):
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                k = index.get((int(r) + dr, int(c) + dc))
                if k is not None:
                    neighbors[i].append(k)
    return NeighborGraph(n=n, neighbors=[np.asarray(nb) for nb in neighbors])


@dataclass
class SphereSample:
    """n points on the unit sphere S^(d-1), stored as rows."""

    points: np.ndarray

    def __post_init__(self) -> None:
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        norms = np.linalg.norm(self.points, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-10):
            worst = int(np.argmax(np.abs(norms - 1.0)))
            raise ValueError(
                f"row {worst} has norm {norms[worst]:.12f}, expected unit norm"
            )

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


_SCHEMAS = ("cmp", "truncgauss", "vmf-auto")


def _parse_rows(path: str) -> tuple[list[str], list[tuple[int, list[str]]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: file is empty, header row required")
        rows = [(lineno, row) for lineno, row in enumerate(reader, start=2) if row]
    return [h.strip() for h in header], rows


def _to_floats(rows, ncol, errors):
    out = np.empty((len(rows), ncol))
    keep = []
    for r, (lineno, row) in enumerate(rows):
        if len(row) != ncol:
            errors.append(f"line {lineno}: expected {ncol} fields, got {len(row)}")
            continue
        try:
            out[r] = [float(v) for v in row]
            keep.append(r)
        except ValueError:
            errors.append(f"line {lineno}: non-numeric cell")
    return out[keep], [rows[r][0] for r in keep]


def load_csv(path: str, schema: str, sqrt_compositional: bool = False):
    """Load and validate a dataset for the named model schema.

    Schemas: ``cmp`` (columns y, x1..xp), ``truncgauss`` (y1..yd, x1..xp),
    ``vmf-auto`` (y1..yd plus optional grid_row, grid_col).  For
    ``vmf-auto`` the return value is ``(SphereSample, NeighborGraph | None)``;
    otherwise a :class:`Dataset`.
    """
    if schema not in _SCHEMAS:
        raise IngestionError(f"unknown schema '{schema}', expected one of {_SCHEMAS}")
    header, rows = _parse_rows(path)
    errors: list[str] = []

    if schema == "cmp":
        if not header or header[0] != "y":
            raise IngestionError(f"{path}: first column must be 'y' for the cmp schema")
        xcols = header[1:]
        expected = [f"x{j + 1}" for j in range(len(xcols))]
        if xcols != expected:
            raise IngestionError(f"{path}: covariate columns must be x1..xp, got {xcols}")
        values, linenos = _to_floats(rows, len(header), errors)
        for v, lineno in zip(values, linenos):
            if v[0] < 0 or v[0] != math.floor(v[0]):
                errors.append(f"line {lineno}: response must be a non-negative integer, got {v[0]}")
        if errors:
            raise IngestionError(f"{path}: " + "; ".join(errors))
        if values.shape[0] == 0:
            raise IngestionError(f"{path}: no data rows")
        return Dataset(responses=values[:, :1], covariates=values[:, 1:],
                       response_names=["y"], covariate_names=xcols)

    if schema == "truncgauss":
        ycols = [h for h in header if h.startswith("y")]
        xcols = [h for h in header if h.startswith("x")]
        if not ycols or not xcols or header != ycols + xcols:
            raise IngestionError(
                f"{path}: truncgauss schema needs columns y1..yd then x1..xp, got {header}"
            )
        values, linenos = _to_floats(rows, len(header), errors)
        d = len(ycols)
        for v, lineno in zip(values, linenos):
            if np.any(v[:d] <= 0):
                errors.append(f"line {lineno}: responses must be strictly positive")
        if errors:
            raise IngestionError(f"{path}: " + "; ".join(errors))
        if values.shape[0] == 0:
            raise IngestionError(f"{path}: no data rows")
        return Dataset(responses=values[:, :d], covariates=values[:, d:],
                       response_names=ycols, covariate_names=xcols)

    # vmf-auto
    has_grid = header[-2:] == ["grid_row", "grid_col"]
    ycols = header[:-2] if has_grid else header
    if not all(h.startswith("y") for h in ycols) or not ycols:
        raise IngestionError(f"{path}: vmf-auto schema needs columns y1..yd, got {header}")
    values, linenos = _to_floats(rows, len(header), errors)
    if errors:
        raise IngestionError(f"{path}: " + "; ".join(errors))
    if values.shape[0] == 0:
        raise IngestionError(f"{path}: no data rows")
    d = len(ycols)
    pts = values[:, :d]
    if sqrt_compositional:
        sums = pts.sum(axis=1)
        for s, lineno in zip(sums, linenos):
            if abs(s - 1.0) > 1e-6:
                errors.append(f"line {lineno}: composition sums to {s:.6f}, expected 1")
        if np.any(pts < 0):
            for row_vals, lineno in zip(pts, linenos):
                if np.any(row_vals < 0):
                    errors.append(f"line {lineno}: compositions must be non-negative")
        if errors:
            raise IngestionError(f"{path}: " + "; ".join(errors))
        pts = np.sqrt(pts)
    norms = np.linalg.norm(pts, axis=1)
    for nv, lineno in zip(norms, linenos):
        if abs(nv - 1.0) > 1e-6:
            errors.append(f"line {lineno}: row norm {nv:.6f} violates unit norm")
    if errors:
        raise IngestionError(f"{path}: " + "; ".join(errors))
    sample = SphereSample(points=pts)
    graph = None
    if has_grid:
        coords = values[:, d:].astype(int)
        if np.any(values[:, d:] != coords):
            raise IngestionError(f"{path}: grid_row/grid_col must be integers")
        graph = build_grid_neighbors(coords)
    return sample, graph
