"""Station networks, the observation operator and synthetic observations."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .errors import GridMismatchError, NonFiniteStateError, TooManyStationsError
from .grid import CYCLIC, VARIABLES, Grid, state_index
from .localization import horizontal_distance, localization_weight, vertical_distance

# number of observed levels per variable (None = all levels); Z is never observed
OBSERVED_LEVELS = {"U": None, "V": None, "T": None, "Q": 4, "Ps": None, "X": None}

_VAR_RANK = {v: i for i, v in enumerate(VARIABLES)}

OBS_CSV_HEADER = ["time", "variable", "level_hpa", "lat_deg", "lon_deg", "value", "error_sd"]


@dataclass(frozen=True)
class ObsErrorTable:
    """Observation error standard deviations by variable.

    Q defaults to 0.1 g/kg (1e-4 kg/kg); see README for why this is not 0.1 kg/kg.
    """

    sd: dict = field(
        default_factory=lambda: {"U": 1.0, "V": 1.0, "T": 1.0, "Q": 1.0e-4, "Ps": 1.0, "X": 1.0}
    )

    def __post_init__(self):
        for v, s in self.sd.items():
            if not s >= 0:
                raise ValueError(f"error SD for {v} must be non-negative")

    def __getitem__(self, variable):
        return float(self.sd[variable])

    def scaled(self, factor):
        return ObsErrorTable({v: s * factor for v, s in self.sd.items()})


@dataclass(frozen=True)
class StationNetwork:
    grid: Grid
    stations: tuple
    observed: dict = field(default_factory=lambda: dict(OBSERVED_LEVELS))

    def __post_init__(self):
        st = tuple((int(a), int(b)) for a, b in self.stations)
        if len(set(st)) != len(st):
            raise ValueError("stations must be distinct grid columns")
        for a, b in st:
            if not (0 <= a < self.grid.n_lat and 0 <= b < self.grid.n_lon):
                raise GridMismatchError(f"station ({a}, {b}) outside grid")
        object.__setattr__(self, "stations", st)

    def station_fields(self):
        """(variable, level) pairs observed at every station, in record order."""
        out = []
        for v in self.grid.variables:
            if v not in self.observed:
                continue
            n = self.grid.n_levels(v)
            cap = self.observed[v]
            out.extend((v, k) for k in range(n if cap is None else min(cap, n)))
        return out

    @property
    def records_per_station(self):
        return len(self.station_fields())

    @property
    def size(self):
        return len(self.stations) * self.records_per_station

    @property
    def state_indices(self):
        fields = self.station_fields()
        return np.array(
            [state_index(self.grid, v, k, a, b) for a, b in self.stations for v, k in fields],
            dtype=np.int64,
        )

    def column_ids(self):
        return [a * self.grid.n_lon + b for a, b in self.stations]


def generate_network(grid, n_stations, seed, layout="stratified"):
    """Pick distinct station columns.

    ``stratified`` draws without replacement inside 30-degree latitude bands,
    with each band's share proportional to its column count (largest
    remainder).  ``regular`` spaces stations evenly by column id.
    """
    n_col = grid.n_columns
    if n_stations > n_col:
        raise TooManyStationsError(f"{n_stations} stations but only {n_col} columns")
    if n_stations < 0:
        raise ValueError("station count must be non-negative")
    if n_stations == 0:
        ids = []
    elif layout == "regular":
        ids = [(i * n_col) // n_stations for i in range(n_stations)]
    elif layout == "stratified":
        lat, _ = grid.column_coords()
        band = np.minimum(((lat + 90.0) // 30.0).astype(int), 5)
        bands = sorted(set(band.tolist()))
        counts = np.array([np.sum(band == b) for b in bands])
        quota = n_stations * counts / n_col
        take = np.floor(quota).astype(int)
        short = n_stations - take.sum()
        order = sorted(range(len(bands)), key=lambda i: (-(quota[i] - take[i]), i))
        for i in order[:short]:
            take[i] += 1
        ids = []
        for i, b in enumerate(bands):
            cols = np.flatnonzero(band == b).tolist()
            ids += rng.sample_without_replacement(seed, rng.NETWORK, cols, int(take[i]), station=int(b))
    else:
        raise ValueError(f"unknown network layout {layout!r}")
    ids = sorted(ids)
    return StationNetwork(grid, tuple(divmod(c, grid.n_lon) for c in ids))


def apply_obs_operator(state, network):
    """Linear selection H x; ``state`` may be (n,) or (n, m)."""
    x = np.asarray(state, dtype=np.float64)
    if x.shape[0] != network.grid.size:
        raise GridMismatchError(f"state length {x.shape[0]} != grid size {network.grid.size}")
    return x[network.state_indices]


def obs_operator_matrix(network):
    idx = network.state_indices
    H = np.zeros((idx.size, network.grid.size))
    H[np.arange(idx.size), idx] = 1.0
    return H


@dataclass(frozen=True)
class ObservationBatch:
    time: int
    values: np.ndarray
    variables: np.ndarray
    level_hpa: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    error_sd: np.ndarray

    def __post_init__(self):
        n = len(self.values)
        for name in ("values", "level_hpa", "lat", "lon", "error_sd"):
            a = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if a.size != n:
                raise ValueError(f"{name} has {a.size} entries, expected {n}")
            object.__setattr__(self, name, a)
        object.__setattr__(self, "variables", np.asarray(self.variables, dtype=object).reshape(-1))
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteStateError("observation values must be finite")
        if np.any(self.error_sd < 0):
            raise ValueError("error SDs must be non-negative")

    @property
    def p(self):
        return len(self.values)

    @classmethod
    def empty(cls, time=0):
        z = np.empty(0)
        return cls(time, z, np.empty(0, dtype=object), z, z, z, z)

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return ObservationBatch(
            self.time,
            self.values[idx],
            self.variables[idx],
            self.level_hpa[idx],
            self.lat[idx],
            self.lon[idx],
            self.error_sd[idx],
        )

    def sort_order(self):
        """Indices ordering records by (lat, lon, variable, level, value, error_sd)."""
        rank = np.array([_VAR_RANK[v] for v in self.variables], dtype=np.int64)
        return np.lexsort((self.error_sd, self.values, self.level_hpa, rank, self.lon, self.lat))

    def sorted(self):
        return self.take(self.sort_order())

    def with_values(self, values):
        return ObservationBatch(
            self.time, values, self.variables, self.level_hpa, self.lat, self.lon, self.error_sd
        )


def _records_template(network, errors):
    grid = network.grid
    fields = network.station_fields()
    lats, lons = grid.lats, grid.lons
    var, lev, la, lo, sd = [], [], [], [], []
    for a, b in network.stations:
        for v, k in fields:
            var.append(v)
            lev.append(grid.level_pressure(v, k))
            la.append(lats[a])
            lo.append(lons[b])
            sd.append(errors[v])
    return var, lev, la, lo, sd


def observe_truth(truth, network, errors=None, seed=0, time=0, noise_scale=1.0):
    """H(truth) plus independent Gaussian noise, one counter stream per (cycle, station).

    ``noise_scale=0`` gives noise-free values while keeping the nominal
    error SDs on the records.
    """
    errors = errors or ObsErrorTable()
    truth = np.asarray(truth, dtype=np.float64)
    if not np.all(np.isfinite(truth)):
        raise NonFiniteStateError("truth contains non-finite values")
    hx = apply_obs_operator(truth, network)
    var, lev, la, lo, sd = _records_template(network, errors)
    sd = np.asarray(sd)
    k = network.records_per_station
    noise = np.concatenate(
        [rng.normals(seed, rng.OBSERVATION, k, cycle=time, station=c) for c in network.column_ids()]
    ) if network.stations else np.empty(0)
    return ObservationBatch(time, hx + noise_scale * sd * noise, var, lev, la, lo, sd)


def batch_state_indices(grid, batch):
    """Map each record back to its flat state index (records must sit on grid points)."""
    lat_idx = _match(grid.lats, batch.lat, "latitude") if grid.kind != CYCLIC else np.zeros(batch.p, int)
    lon_idx = _match(grid.lons, batch.lon, "longitude")
    surface = np.array([VARIABLES[v].surface for v in batch.variables], dtype=bool)
    level = np.zeros(batch.p, dtype=np.int64)
    if (~surface).any():
        level[~surface] = _match(np.asarray(grid.levels), batch.level_hpa[~surface], "level")
    offsets = grid.offsets
    out = np.empty(batch.p, dtype=np.int64)
    for v in set(batch.variables):
        if v not in offsets:
            raise GridMismatchError(f"variable {v} is not part of the grid")
        sel = batch.variables == v
        if level[sel].max() >= grid.n_levels(v):
            raise GridMismatchError(f"observation level not defined for {v}")
        out[sel] = offsets[v] + (level[sel] * grid.n_lat + lat_idx[sel]) * grid.n_lon + lon_idx[sel]
    return out


def _match(coords, values, what):
    diff = np.abs(np.asarray(values)[:, None] - coords[None, :])
    idx = np.argmin(diff, axis=1)
    if np.any(diff[np.arange(len(idx)), idx] > 1e-6):
        raise GridMismatchError(f"observation {what} does not coincide with a grid point")
    return idx


def select_local_obs(lat, lon, level_hpa, batch, L_h, L_v, grid=None):
    """Records inside both cutoffs of an analysis point, with their weights.

    Returns ``(indices, weights)``; indices refer to ``batch`` and are
    ordered by the batch's total sort key, so the result does not depend on
    record order.
    """
    if not (L_h > 0 and L_v > 0):
        raise ValueError("localization scales must be positive")
    if batch.p == 0:
        return np.empty(0, dtype=np.int64), np.empty(0)
    d_h = horizontal_distance(grid, lat, lon, batch.lat, batch.lon)
    d_v = vertical_distance(level_hpa, batch.level_hpa)
    w = localization_weight(d_h, d_v, L_h, L_v)
    order = batch.sort_order()
    keep = order[w[order] > 0.0]
    return keep, w[keep]


# --- files ----------------------------------------------------------------

def _fmt(x):
    return repr(float(x))


def write_observations(path, batches):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(OBS_CSV_HEADER)
        for b in batches:
            for i in range(b.p):
                w.writerow(
                    [b.time, b.variables[i], _fmt(b.level_hpa[i]), _fmt(b.lat[i]),
                     _fmt(b.lon[i]), _fmt(b.values[i]), _fmt(b.error_sd[i])]
                )


def read_observations(path):
    """Read an observation CSV into {time: ObservationBatch}."""
    rows = {}
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        if r.fieldnames != OBS_CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {r.fieldnames}")
        for row in r:
            rows.setdefault(int(row["time"]), []).append(row)
    out = {}
    for t, recs in rows.items():
        out[t] = ObservationBatch(
            t,
            [float(r["value"]) for r in recs],
            [r["variable"] for r in recs],
            [float(r["level_hpa"]) for r in recs],
            [float(r["lat_deg"]) for r in recs],
            [float(r["lon_deg"]) for r in recs],
            [float(r["error_sd"]) for r in recs],
        )
    return out


def write_network(path, network):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lat_idx", "lon_idx"])
        w.writerows(network.stations)


def read_network(path, grid):
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        st = [(int(row["lat_idx"]), int(row["lon_idx"])) for row in r]
    return StationNetwork(grid, tuple(st))
