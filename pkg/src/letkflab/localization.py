"""Distances and the Gaussian localization function with hard cutoff."""
from __future__ import annotations

import math

import numpy as np

from .errors import InvalidDistanceError
from .grid import CYCLIC

EARTH_RADIUS_KM = 6371.0
CUTOFF_FACTOR = 2.0 * math.sqrt(10.0 / 3.0)


def great_circle_distance(lat1, lon1, lat2, lon2):
    """Haversine distance in km; accepts scalars or broadcastable arrays."""
    p1, p2 = np.deg2rad(lat1), np.deg2rad(lat2)
    dphi = p2 - p1
    dlam = np.deg2rad(np.asarray(lon2, dtype=np.float64) - lon1)
    a = np.sin(dphi / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlam / 2.0) ** 2
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    return float(d) if np.ndim(d) == 0 else d


def cyclic_distance(lon1, lon2, n_sites):
    """Ring distance in site units between longitudes of a cyclic-1d grid."""
    d = np.abs(np.asarray(lon2, dtype=np.float64) - lon1) * (n_sites / 360.0)
    d = np.mod(d, n_sites)
    d = np.minimum(d, n_sites - d)
    return float(d) if np.ndim(d) == 0 else d


def horizontal_distance(grid, lat1, lon1, lat2, lon2):
    """km on global grids, sites on cyclic-1d grids."""
    if grid is not None and grid.kind == CYCLIC:
        return cyclic_distance(lon1, lon2, grid.n_lon)
    return great_circle_distance(lat1, lon1, lat2, lon2)


def vertical_distance(p1_hpa, p2_hpa):
    """|ln p1 - ln p2| with pressures converted to Pa."""
    return np.abs(np.log(np.asarray(p1_hpa, dtype=np.float64) * 100.0) - np.log(np.asarray(p2_hpa) * 100.0))


def localization_weight(d_h, d_v, L_h, L_v):
    """Gaussian weight, exactly zero at or beyond ``2*sqrt(10/3)`` scales in either direction.

    Works elementwise on arrays.  Infinite scales disable localization in
    that direction.
    """
    d_h = np.asarray(d_h, dtype=np.float64)
    d_v = np.asarray(d_v, dtype=np.float64)
    if np.any(d_h < 0) or np.any(d_v < 0):
        raise InvalidDistanceError("distances must be non-negative")
    if not (L_h > 0 and L_v > 0):
        raise ValueError("localization scales must be positive")
    inside = (d_h < CUTOFF_FACTOR * L_h) & (d_v < CUTOFF_FACTOR * L_v)
    w = np.where(inside, np.exp(-0.5 * ((d_h / L_h) ** 2 + (d_v / L_v) ** 2)), 0.0)
    return float(w) if w.ndim == 0 else w
