"""Counter-based random streams.

Every stream is Philox4x64-10 (``numpy.random.Philox``) with

* key     = (seed, purpose)
* counter = (cycle, station, 0, 0)

Raw 64-bit words ``r`` become uniforms ``u = ((r >> 11) + 1) * 2**-53`` in
(0, 1], and pairs of uniforms become standard normals by Box-Muller
(``sqrt(-2 ln u1) * cos(2 pi u2)``, then ``... * sin(2 pi u2)``).  Nothing
depends on numpy's own distribution samplers, so the streams can be
reproduced from the description above.
"""
from __future__ import annotations

import numpy as np

OBSERVATION = 1
ENSEMBLE = 2
NETWORK = 3
NATURE = 4

_MASK = (1 << 64) - 1


def _bitgen(seed, purpose, cycle=0, station=0):
    return np.random.Philox(
        key=[int(seed) & _MASK, int(purpose) & _MASK],
        counter=[int(cycle) & _MASK, int(station) & _MASK, 0, 0],
    )


def uniforms(seed, purpose, size, cycle=0, station=0):
    raw = _bitgen(seed, purpose, cycle, station).random_raw(int(size))
    return ((raw >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53


def normals(seed, purpose, size, cycle=0, station=0):
    size = int(size)
    u = uniforms(seed, purpose, 2 * ((size + 1) // 2), cycle, station)
    r = np.sqrt(-2.0 * np.log(u[0::2]))
    theta = 2.0 * np.pi * u[1::2]
    z = np.empty(2 * r.size)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return z[:size]


def sample_without_replacement(seed, purpose, population, k, cycle=0, station=0):
    """First ``k`` entries of a partial Fisher-Yates shuffle driven by :func:`uniforms`.

    Step ``i`` swaps position ``i`` with ``i + min(floor(u_i * (N - i)), N - i - 1)``.
    """
    pool = list(population)
    n = len(pool)
    if not 0 <= k <= n:
        raise ValueError(f"cannot draw {k} of {n}")
    u = uniforms(seed, purpose, k, cycle, station)
    for i in range(k):
        j = i + min(int(u[i] * (n - i)), n - i - 1)
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:k]
