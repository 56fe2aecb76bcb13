"""Forecast models and nature runs.

A forecast model advances a state by one assimilation cycle (6 h).  States
may be passed as an ``(n,)`` vector or an ``(n, m)`` matrix of members; all
arithmetic is elementwise along the member axis, so advancing the matrix is
bit-identical to advancing each member separately.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import (
    GridMismatchError,
    GridTooSmallError,
    ModelBlewUpError,
    NonFiniteStateError,
)
from .grid import CYCLIC, EnsembleState, Grid


def lorenz96_tendency(x, F):
    """dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F on a cyclic ring (axis 0)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 4:
        raise GridTooSmallError(f"Lorenz-96 needs at least 4 sites, got {x.shape[0]}")
    return (np.roll(x, -1, axis=0) - np.roll(x, 2, axis=0)) * np.roll(x, 1, axis=0) - x + F


def rk4_step(tendency, x, dt):
    """One classical fourth-order Runge-Kutta step of ``dx/dt = tendency(x)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteStateError("RK4 input contains non-finite values")
    k1 = tendency(x)
    k2 = tendency(x + 0.5 * dt * k1)
    k3 = tendency(x + 0.5 * dt * k2)
    k4 = tendency(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


class ForecastModel:
    """Base class: subclasses implement :meth:`step` for one cycle."""

    name = "base"

    def __init__(self, grid, params):
        self.grid = grid
        self.params = dict(params)

    def step(self, x):
        raise NotImplementedError

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.grid.size:
            raise GridMismatchError(
                f"{self.name}: state length {x.shape[0]} != grid size {self.grid.size}"
            )
        return x

    def describe(self):
        return {"name": self.name, "params": self.params, "grid": self.grid.to_dict()}


@dataclass(frozen=True)
class Lorenz96Params:
    F: float = 8.0
    n_sites: int = 40
    dt_internal: float = 0.05
    steps_per_cycle: int = 1

    def __post_init__(self):
        if self.n_sites < 4:
            raise GridTooSmallError("Lorenz-96 needs n_sites >= 4")
        if not self.dt_internal > 0:
            raise ValueError("dt_internal must be positive")
        if self.steps_per_cycle < 1:
            raise ValueError("steps_per_cycle must be >= 1")


class Lorenz96(ForecastModel):
    name = "lorenz96"

    def __init__(self, params=None, **kw):
        p = params if isinstance(params, Lorenz96Params) else Lorenz96Params(**(params or {}), **kw)
        super().__init__(Grid.cyclic(p.n_sites), p.__dict__)
        self.p = p

    def tendency(self, x):
        return lorenz96_tendency(x, self.p.F)

    def step(self, x):
        x = self._check(x)
        for _ in range(self.p.steps_per_cycle):
            x = rk4_step(self.tendency, x, self.p.dt_internal)
        return x


def default_climatology(grid):
    """Smooth zonally symmetric reference state for the toy global model."""
    lat, _ = grid.column_coords()
    coslat = np.cos(np.deg2rad(lat))
    sinlat = np.sin(np.deg2rad(lat))
    out = np.empty(grid.size)
    for v, k in grid.fields():
        p = grid.levels[k]
        logp = np.log(p / 1000.0)
        if v == "U":
            f = 20.0 * coslat**2 * (1.0 - logp / 3.0) - 5.0
        elif v == "V":
            f = 2.0 * sinlat * coslat
        elif v == "T":
            f = 220.0 + 70.0 * coslat * (p / 1000.0) ** 0.286
        elif v == "Q":
            f = 0.015 * coslat**2 * (p / 1000.0) ** 3
        elif v == "Z":
            f = -7000.0 * logp + 200.0 * coslat
        elif v == "Ps":
            f = 1010.0 + 5.0 * np.cos(2.0 * np.deg2rad(lat))
        else:
            f = np.zeros_like(lat)
        out[grid.field_indices(v, k)] = f
    return out


@dataclass(frozen=True)
class AdvectionModelParams:
    """Zonal speeds are in grid cells per cycle, one per pressure level."""

    speeds: tuple = (1.0, 1.0, 1.0, 3.0, 3.0, 5.0, 3.0)
    damping: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "speeds", tuple(float(s) for s in self.speeds))
        if not 0.0 <= self.damping <= 1.0:
            raise ValueError("damping must lie in [0, 1]")
        if not all(np.isfinite(self.speeds)):
            raise ValueError("advection speeds must be finite")


def _zonal_shift(field, speed):
    """Shift (..., n_lat, n_lon) fields eastward by ``speed`` cells, periodic."""
    whole = int(np.floor(speed))
    frac = speed - whole
    shifted = np.roll(field, whole, axis=-1)
    if frac == 0.0:
        return shifted
    return (1.0 - frac) * shifted + frac * np.roll(shifted, 1, axis=-1)


def advection_step(state, grid, params, climatology):
    """Advect every level zonally, then relax toward climatology.

    Surface fields use the lowest level's speed.
    """
    x = np.asarray(state, dtype=np.float64)
    if x.shape[0] != grid.size or np.shape(climatology)[0] != grid.size:
        raise GridMismatchError("state/climatology do not match the grid")
    if len(params.speeds) != len(grid.levels):
        raise GridMismatchError(
            f"{len(params.speeds)} speeds for {len(grid.levels)} levels"
        )
    out = np.empty_like(x)
    tail = x.shape[1:]
    for v, k in grid.fields():
        idx = grid.field_indices(v, k)
        f = x[idx].reshape((grid.n_lat, grid.n_lon) + tail)
        f = np.moveaxis(f, (0, 1), (-2, -1))
        f = np.moveaxis(_zonal_shift(f, params.speeds[k]), (-2, -1), (0, 1))
        out[idx] = f.reshape((grid.n_columns,) + tail)
    d = params.damping
    if d == 0.0:
        return out
    clim = np.asarray(climatology, dtype=np.float64).reshape((-1,) + (1,) * len(tail))
    return (1.0 - d) * out + d * clim


class AdvectionModel(ForecastModel):
    """Damped zonal advection on the global latitude-longitude grid."""

    name = "advection"

    def __init__(self, grid=None, params=None, climatology=None, **kw):
        grid = grid or Grid()
        p = params if isinstance(params, AdvectionModelParams) else AdvectionModelParams(**(params or {}), **kw)
        super().__init__(grid, {"speeds": list(p.speeds), "damping": p.damping})
        self.p = p
        clim = default_climatology(grid) if climatology is None else climatology
        self.climatology = np.asarray(clim, dtype=np.float64)
        self.climatology.flags.writeable = False

    def step(self, x):
        return advection_step(self._check(x), self.grid, self.p, self.climatology)


def build_model(kind, grid=None, params=None):
    params = dict(params or {})
    if kind == "lorenz96":
        if grid is not None and grid.kind == CYCLIC:
            params.setdefault("n_sites", grid.n_lon)
        return Lorenz96(params)
    if kind == "advection":
        return AdvectionModel(grid or Grid(), params)
    raise ValueError(f"unknown model kind {kind!r}")


def forecast_ensemble(model, X, cycles=1):
    """Advance every member of ``X`` independently by ``cycles`` cycles."""
    members = X.members if isinstance(X, EnsembleState) else np.asarray(X, dtype=np.float64)
    if members.ndim == 1:
        members = members[:, None]
    bad = ~np.all(np.isfinite(members), axis=0)
    if bad.any():
        raise NonFiniteStateError(
            f"member {int(np.argmax(bad))} is non-finite", member=int(np.argmax(bad))
        )
    x = members
    for _ in range(cycles):
        x = model.step(x)
        bad = ~np.all(np.isfinite(x), axis=0)
        if bad.any():
            i = int(np.argmax(bad))
            raise NonFiniteStateError(f"member {i} became non-finite", member=i)
    time = X.time + cycles if isinstance(X, EnsembleState) else cycles
    return EnsembleState(x, time=time, grid=model.grid)


@dataclass
class Trajectory:
    """Truth states, one row per cycle; ``spinup`` holds the discarded lead-in."""

    states: np.ndarray
    spinup: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))


def initial_state(model, seed):
    """Seeded starting point for a nature run (counter-based streams, see :mod:`letkflab.rng`)."""
    if isinstance(model, Lorenz96):
        return model.p.F + rng.normals(seed, rng.NATURE, model.grid.size)
    if isinstance(model, AdvectionModel):
        return model.climatology + smooth_anomaly(model.grid, seed)
    raise ValueError(f"no default initial state for {model.name}")


ANOMALY_SCALE = {"U": 5.0, "V": 5.0, "T": 3.0, "Q": 1.0e-3, "Z": 50.0, "Ps": 5.0, "X": 1.0}


def smooth_anomaly(grid, seed, n_waves=4):
    """Random large-scale pattern: a few zonal/meridional waves per field.

    Field ``i`` (layout order) draws from station ``i`` of the nature stream.
    """
    lat, lon = grid.column_coords()
    phi, lam = np.deg2rad(lat), np.deg2rad(lon)
    out = np.zeros(grid.size)
    for i, (v, k) in enumerate(grid.fields()):
        u = rng.uniforms(seed, rng.NATURE, 4 * n_waves, cycle=1, station=i).reshape(n_waves, 4)
        amp = rng.normals(seed, rng.NATURE, n_waves, cycle=2, station=i)
        f = np.zeros(grid.n_columns)
        for (u_zw, u_mw, u_p1, u_p2), a in zip(u, amp):
            zw = 1 + min(int(5 * u_zw), 4)
            mw = 1 + min(int(3 * u_mw), 2)
            f += a * np.cos(zw * lam + 2 * np.pi * u_p1) * np.cos(phi) * np.sin(
                mw * (phi + np.pi / 2) + 2 * np.pi * u_p2
            )
        f *= ANOMALY_SCALE[v] / max(np.std(f), 1e-12)
        out[grid.field_indices(v, k)] = f
    return out


def nature_run(model, x0=None, n_spinup=0, n_cycles=1, seed=0):
    """Integrate a truth trajectory; spinup states are kept separately.

    ``states[t]`` is ``step^(n_spinup + t + 1)(x0)``.
    """
    if n_spinup < 0 or n_cycles < 0:
        raise ValueError("n_spinup and n_cycles must be non-negative")
    x = initial_state(model, seed) if x0 is None else np.asarray(x0, dtype=np.float64)
    n = model.grid.size
    spin = np.empty((n_spinup, n))
    states = np.empty((n_cycles, n))
    for c in range(n_spinup + n_cycles):
        try:
            x = model.step(x)
        except (NonFiniteStateError, FloatingPointError) as exc:
            raise ModelBlewUpError(f"nature run blew up at cycle {c}", cycle=c) from exc
        if not np.all(np.isfinite(x)):
            raise ModelBlewUpError(f"nature run blew up at cycle {c}", cycle=c)
        if c < n_spinup:
            spin[c] = x
        else:
            states[c - n_spinup] = x
    return Trajectory(states=states, spinup=spin)
