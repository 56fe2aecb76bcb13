"""State-space geometry, ensemble containers and snapshot files.

The flat state vector is laid out variable-major, then level, then
latitude, then longitude.  A grid *column* is a (lat_idx, lon_idx) pair and
has the column id ``lat_idx * n_lon + lon_idx``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateEnsembleError,
    EmptyEnsembleError,
    GridMismatchError,
    IndexOutOfBoundsError,
    InvalidLevelError,
    ShapeMismatchError,
)

GLOBAL = "global-latlon"
CYCLIC = "cyclic-1d"

# Pressure levels (hPa), lowest (nearest the surface) first.
DEFAULT_LEVELS = (925.0, 850.0, 700.0, 600.0, 500.0, 250.0, 50.0)


@dataclass(frozen=True)
class VariableKind:
    symbol: str
    name: str
    units: str
    surface: bool = False


VARIABLES = {
    "U": VariableKind("U", "zonal wind", "m/s"),
    "V": VariableKind("V", "meridional wind", "m/s"),
    "T": VariableKind("T", "temperature", "K"),
    "Q": VariableKind("Q", "specific humidity", "kg/kg"),
    "Z": VariableKind("Z", "geopotential height", "m"),
    "Ps": VariableKind("Ps", "surface pressure", "hPa", surface=True),
    # single dimensionless variable of the cyclic-1d (Lorenz-96) grid
    "X": VariableKind("X", "cyclic site value", "1"),
}

GLOBAL_VARIABLES = ("U", "V", "T", "Q", "Z", "Ps")


@dataclass(frozen=True)
class Grid:
    kind: str = GLOBAL
    n_lon: int = 64
    n_lat: int = 32
    levels: tuple = DEFAULT_LEVELS
    variables: tuple = GLOBAL_VARIABLES

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(float(p) for p in self.levels))
        object.__setattr__(self, "variables", tuple(self.variables))
        if self.kind not in (GLOBAL, CYCLIC):
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if self.n_lon < 1 or self.n_lat < 1:
            raise ValueError("grid needs at least one column")
        if not self.levels or any(p <= 0 for p in self.levels):
            raise ValueError("levels must be positive pressures in hPa")
        unknown = [v for v in self.variables if v not in VARIABLES]
        if unknown or not self.variables:
            raise ValueError(f"unknown variables {unknown}")
        if len(set(self.variables)) != len(self.variables):
            raise ValueError("duplicate variables")
        if self.kind == CYCLIC and (
            self.n_lat != 1 or len(self.levels) != 1 or len(self.variables) != 1
        ):
            raise ValueError("cyclic-1d grids have one latitude, level and variable")

    @classmethod
    def cyclic(cls, n_sites, level=1000.0):
        return cls(kind=CYCLIC, n_lon=n_sites, n_lat=1, levels=(level,), variables=("X",))

    @property
    def n_columns(self):
        return self.n_lon * self.n_lat

    def n_levels(self, variable):
        return 1 if VARIABLES[variable].surface else len(self.levels)

    def level_pressure(self, variable, level):
        """Pressure (hPa) used for vertical distances; surface fields sit on the lowest level."""
        self._check_level(variable, level)
        return self.levels[level]

    @property
    def size(self):
        return self.n_columns * sum(self.n_levels(v) for v in self.variables)

    @property
    def offsets(self):
        out, k = {}, 0
        for v in self.variables:
            out[v] = k
            k += self.n_levels(v) * self.n_columns
        return out

    @property
    def lats(self):
        if self.kind == CYCLIC:
            return np.zeros(1)
        dlat = 180.0 / self.n_lat
        return -90.0 + (np.arange(self.n_lat) + 0.5) * dlat

    @property
    def lons(self):
        return np.arange(self.n_lon) * (360.0 / self.n_lon)

    def column_coords(self):
        """(lat, lon) in degrees of every column, ordered by column id."""
        lat, lon = np.meshgrid(self.lats, self.lons, indexing="ij")
        return lat.ravel(), lon.ravel()

    def _check_level(self, variable, level):
        if variable not in self.variables:
            raise InvalidLevelError(f"variable {variable!r} not on this grid")
        if not 0 <= level < self.n_levels(variable):
            raise InvalidLevelError(f"variable {variable} has no level {level}")

    def field_indices(self, variable, level):
        """Flat indices of one horizontal field, ordered by column id."""
        self._check_level(variable, level)
        start = self.offsets[variable] + level * self.n_columns
        return np.arange(start, start + self.n_columns)

    def fields(self):
        """All (variable, level) pairs in layout order."""
        return [(v, k) for v in self.variables for k in range(self.n_levels(v))]

    def to_dict(self):
        return {
            "kind": self.kind,
            "n_lon": self.n_lon,
            "n_lat": self.n_lat,
            "levels": list(self.levels),
            "variables": list(self.variables),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            kind=d["kind"],
            n_lon=int(d["n_lon"]),
            n_lat=int(d["n_lat"]),
            levels=tuple(d["levels"]),
            variables=tuple(d["variables"]),
        )


def state_index(grid, variable, level, lat_idx, lon_idx):
    grid._check_level(variable, level)
    if not (0 <= lat_idx < grid.n_lat and 0 <= lon_idx < grid.n_lon):
        raise IndexOutOfBoundsError(
            f"column ({lat_idx}, {lon_idx}) outside {grid.n_lat}x{grid.n_lon} grid"
        )
    return (
        grid.offsets[variable]
        + level * grid.n_columns
        + lat_idx * grid.n_lon
        + lon_idx
    )


def state_locate(grid, index):
    """Inverse of :func:`state_index`: flat index -> (variable, level, lat_idx, lon_idx)."""
    if not 0 <= index < grid.size:
        raise IndexOutOfBoundsError(f"flat index {index} outside state of size {grid.size}")
    for v in reversed(grid.variables):
        start = grid.offsets[v]
        if index >= start:
            rem = index - start
            level, col = divmod(rem, grid.n_columns)
            lat_idx, lon_idx = divmod(col, grid.n_lon)
            return v, level, lat_idx, lon_idx
    raise AssertionError("unreachable")


def area_weights(grid, weighted=True):
    """Per-column averaging weights summing to one (cos-latitude on global grids)."""
    if grid.kind == CYCLIC or not weighted:
        return np.full(grid.n_columns, 1.0 / grid.n_columns)
    lat, _ = grid.column_coords()
    w = np.cos(np.deg2rad(lat))
    return w / w.sum()


@dataclass(frozen=True)
class EnsembleState:
    """n x m member matrix (columns are members) valid at one cycle."""

    members: np.ndarray
    time: int = 0
    grid: Grid | None = field(default=None, compare=False)

    def __post_init__(self):
        x = np.array(self.members, dtype=np.float64, copy=True)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise ShapeMismatchError("members must be an n x m matrix")
        if self.grid is not None and x.shape[0] != self.grid.size:
            raise GridMismatchError(
                f"ensemble has n={x.shape[0]} but grid size is {self.grid.size}"
            )
        x.flags.writeable = False
        object.__setattr__(self, "members", x)

    @property
    def n(self):
        return self.members.shape[0]

    @property
    def m(self):
        return self.members.shape[1]

    @property
    def mean(self):
        return ensemble_mean(self)

    @property
    def perturbations(self):
        return ensemble_perturbations(self)


def _members(X):
    return X.members if isinstance(X, EnsembleState) else np.asarray(X, dtype=np.float64)


def ensemble_mean(X):
    x = _members(X)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] == 0:
        raise EmptyEnsembleError("ensemble has no members")
    return x.mean(axis=1)


def ensemble_perturbations(X):
    x = _members(X)
    if x.ndim != 2 or x.shape[1] < 2:
        raise DegenerateEnsembleError("perturbations need at least two members")
    return x - x.mean(axis=1, keepdims=True)


def sample_covariance(dX):
    """Unbiased sample covariance ``dX dX^T / (m - 1)`` of perturbations."""
    dX = np.asarray(dX, dtype=np.float64)
    if dX.ndim != 2 or dX.shape[1] < 2:
        raise DegenerateEnsembleError("covariance needs at least two members")
    return dX @ dX.T / (dX.shape[1] - 1)


# --- snapshot files -------------------------------------------------------

SNAPSHOT_FORMAT = "letkflab-snapshot"


def write_snapshot(path, members, grid=None, time=0, extra=None):
    """Write ``<path>.json`` (header) and ``<path>.bin`` (column-major float64 LE).

    Returns the header path.
    """
    path = Path(path)
    x = np.asarray(members, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, m = x.shape
    if grid is not None and n != grid.size:
        raise GridMismatchError(f"snapshot has n={n}, grid size {grid.size}")
    bin_path = path.with_suffix(".bin")
    header = {
        "format": SNAPSHOT_FORMAT,
        "version": 1,
        "grid": grid.to_dict() if grid is not None else None,
        "time": int(time),
        "n": n,
        "m": m,
        "dtype": "float64",
        "byte_order": "little",
        "layout": "column-major",
        "data_file": bin_path.name,
    }
    if extra:
        header["extra"] = extra
    # column-major n x m == row-major m x n
    _atomic_write_bytes(bin_path, np.ascontiguousarray(x.T).astype("<f8").tobytes())
    _atomic_write_bytes(
        path.with_suffix(".json"), (json.dumps(header, indent=1) + "\n").encode()
    )
    return path.with_suffix(".json")


def read_snapshot(path):
    """Read a snapshot written by :func:`write_snapshot` -> (EnsembleState, header)."""
    path = Path(path).with_suffix(".json")
    header = json.loads(path.read_text())
    if header.get("format") != SNAPSHOT_FORMAT:
        raise ValueError(f"{path} is not a snapshot header")
    raw = np.fromfile(path.parent / header["data_file"], dtype="<f8")
    n, m = header["n"], header["m"]
    if raw.size != n * m:
        raise ShapeMismatchError(f"{path}: expected {n * m} values, found {raw.size}")
    grid = Grid.from_dict(header["grid"]) if header["grid"] else None
    members = raw.reshape(m, n).T
    return EnsembleState(members, time=header["time"], grid=grid), header


def _atomic_write_bytes(path, data):
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
