"""Local ensemble transform Kalman filter analysis with adaptive inflation.

Every grid column is analysed once per pressure level.  All variables at
one (column, level) share the local observation set and the ensemble
transform; surface fields are analysed with the lowest level.  Localization
inflates each observation error variance by the inverse localization
weight, i.e. it scales ``R^-1`` entries by the weight.

Multiplicative inflation ``alpha`` scales the background covariance
(``P -> alpha P``) and enters the ensemble-space covariance as
``(m-1)/alpha``.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AnalysisBlewUpError,
    GridMismatchError,
    NonFiniteStateError,
    NotPSDError,
    SingularEnsembleSpaceError,
    ZeroSpreadError,
)
from .grid import EnsembleState, area_weights
from .localization import (  # noqa: F401  (re-exported)
    CUTOFF_FACTOR,
    great_circle_distance,
    horizontal_distance,
    localization_weight,
    vertical_distance,
)
from .observations import batch_state_indices

CHUNK = 256


@dataclass(frozen=True)
class LetkfConfig:
    L_h: float = 600.0
    L_v: float = 1.0
    inflation: str = "adaptive"
    alpha_fixed: float = 1.0
    v_alpha: float = 0.04
    alpha_min: float = 0.9
    alpha_max: float = 10.0
    alpha_init: float = 1.0
    # clamping each noisy per-column estimate before the Gaussian update
    # biases alpha upward; by default only the posterior is clamped
    clamp_estimate: bool = False

    def __post_init__(self):
        if not (self.L_h > 0 and self.L_v > 0):
            raise ValueError("localization scales must be positive")
        if self.inflation not in ("adaptive", "fixed"):
            raise ValueError(f"unknown inflation mode {self.inflation!r}")
        if not self.alpha_max > self.alpha_min > 0:
            raise ValueError("need 0 < alpha_min < alpha_max")
        if not self.v_alpha > 0:
            raise ValueError("v_alpha must be positive")
        if not self.alpha_fixed > 0:
            raise ValueError("alpha_fixed must be positive")

    @property
    def bounds(self):
        return self.alpha_min, self.alpha_max


@dataclass
class InflationField:
    """One multiplicative factor per grid column, shaped (n_lat, n_lon)."""

    grid: object
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(self.grid.n_lat, self.grid.n_lon)
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ValueError("inflation factors must be finite and positive")
        self.values = v

    @classmethod
    def constant(cls, grid, value=1.0):
        return cls(grid, np.full((grid.n_lat, grid.n_lon), float(value)))

    @property
    def columns(self):
        return self.values.reshape(-1)

    def mean(self, weighted=True):
        return float(area_weights(self.grid, weighted) @ self.columns)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lat_idx", "lon_idx", "alpha"])
            for (a, b), val in np.ndenumerate(self.values):
                w.writerow([a, b, repr(float(val))])

    @classmethod
    def read_csv(cls, path, grid):
        vals = np.full((grid.n_lat, grid.n_lon), np.nan)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                vals[int(row["lat_idx"]), int(row["lon_idx"])] = float(row["alpha"])
        return cls(grid, vals)


def symmetric_sqrt(A, tol=1e-10):
    """Symmetric PSD square root by eigendecomposition.

    Eigenvalues down to ``-tol * trace`` are clamped to zero; anything more
    negative (or an asymmetric input) raises :class:`NotPSDError`.
    """
    A = np.asarray(A, dtype=np.float64)
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if A.ndim != 2 or A.shape[0] != A.shape[1] or np.max(np.abs(A - A.T), initial=0.0) > tol * scale:
        raise NotPSDError("matrix is not symmetric")
    lam, U = np.linalg.eigh(A)
    floor = -tol * max(abs(float(np.trace(A))), np.finfo(float).tiny)
    if lam.size and lam[0] < floor:
        raise NotPSDError(f"smallest eigenvalue {lam[0]:.3e} is negative")
    lam = np.clip(lam, 0.0, None)
    S = (U * np.sqrt(lam)) @ U.T
    return 0.5 * (S + S.T)


def _transform(Y, rinv, d, alpha, with_pa=True):
    """Batched ensemble-space solve.

    Y: (B, P, m) obs-space perturbations, rinv: (B, P) effective inverse
    error variances (zero for padding), d: (B, P) innovations, alpha: (B,).
    Returns mean weights (B, m), transforms (B, m, m) and P~a (B, m, m),
    the last being None when ``with_pa`` is false.
    """
    B, _, m = Y.shape
    C = Y * rinv[..., None]
    Yt = np.swapaxes(Y, -1, -2)
    A = Yt @ C
    diag = (m - 1) / alpha
    A[:, np.arange(m), np.arange(m)] += diag[:, None]
    if not np.all(np.isfinite(A)):
        raise SingularEnsembleSpaceError("ensemble-space precision matrix is not finite")
    lam, U = np.linalg.eigh(A)
    if np.any(~(lam > 0)):
        raise SingularEnsembleSpaceError("ensemble-space precision matrix is singular")
    Ut = np.swapaxes(U, -1, -2)
    b = np.einsum("bpi,bp->bi", C, d)
    wbar = np.einsum("bij,bj->bi", U, np.einsum("bji,bj->bi", U, b) / lam)
    W = (U * np.sqrt((m - 1) / lam)[:, None, :]) @ Ut
    Pa = (U / lam[:, None, :]) @ Ut if with_pa else None
    empty = ~np.any(rinv > 0, axis=1)
    if empty.any():
        eye = np.eye(m)
        wbar[empty] = 0.0
        W[empty] = np.sqrt(alpha[empty])[:, None, None] * eye
        if with_pa:
            Pa[empty] = (alpha[empty] / (m - 1))[:, None, None] * eye
    return wbar, W, Pa


@dataclass
class LocalAnalysisResult:
    wbar: np.ndarray
    W: np.ndarray
    Pa: np.ndarray
    p_local: int
    innovation_stat: float
    analysis: np.ndarray | None = field(default=None, repr=False)


def local_analysis(xb_mean, dXb, Yb, d, R_diag, loc_weights, alpha=1.0):
    """Analyse one local region.

    ``R_diag`` holds error variances; effective inverse variances are
    ``loc_weights / R_diag``.  The analysis ensemble
    ``xb_mean 1 + dXb (wbar 1 + W)`` is returned in ``.analysis``.
    """
    dXb = np.atleast_2d(np.asarray(dXb, dtype=np.float64))
    m = dXb.shape[1]
    Yb = np.asarray(Yb, dtype=np.float64).reshape(-1, m)
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    R_diag = np.asarray(R_diag, dtype=np.float64).reshape(-1)
    loc = np.asarray(loc_weights, dtype=np.float64).reshape(-1)
    if not (Yb.shape[0] == d.size == R_diag.size == loc.size):
        raise GridMismatchError("Yb, d, R_diag and loc_weights disagree in length")
    if np.any(loc <= 0) or np.any(loc > 1):
        raise ValueError("localization weights must lie in (0, 1]")
    if np.any(R_diag <= 0):
        raise ValueError("error variances must be positive")
    rinv = loc / R_diag
    wbar, W, Pa = _transform(Yb[None], rinv[None], d[None], np.array([float(alpha)]))
    wbar, W, Pa = wbar[0], W[0], Pa[0]
    xb_mean = np.asarray(xb_mean, dtype=np.float64).reshape(-1)
    Xa = xb_mean[:, None] + dXb @ (wbar[:, None] + W)
    return LocalAnalysisResult(
        wbar=wbar,
        W=W,
        Pa=Pa,
        p_local=int(d.size),
        innovation_stat=float(d @ (rinv * d)),
        analysis=Xa,
    )


def inflation_statistics(d, rinv, Yb):
    """(d^T R^-1 d, tr(R^-1 Y Y^T)/(m-1)) for effective inverse variances ``rinv``."""
    Yb = np.asarray(Yb, dtype=np.float64)
    m = Yb.shape[-1]
    num = float(np.sum(rinv * np.asarray(d) ** 2))
    tau = float(np.sum(rinv * np.sum(Yb**2, axis=-1)) / (m - 1))
    return num, tau


def estimate_inflation(d, R_eff_diag, Yb, weights=None, bounds=(0.9, 10.0)):
    """Observation-space estimate ``(d^T R^-1 d - p) / tr(R^-1 Y Y^T / (m-1))``.

    ``p`` is the sum of localization ``weights`` (the record count when all
    weights are one or ``weights`` is None).  The estimate is clamped to
    ``bounds``.
    """
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    if d.size == 0:
        raise ValueError("need at least one observation")
    rinv = 1.0 / np.asarray(R_eff_diag, dtype=np.float64).reshape(-1)
    p = float(d.size if weights is None else np.sum(weights))
    num, tau = inflation_statistics(d, rinv, np.asarray(Yb).reshape(d.size, -1))
    if not tau > 0:
        raise ZeroSpreadError("no ensemble spread in observation space")
    return float(np.clip((num - p) / tau, *bounds))


def observation_variance(p_local, alpha_prior=None, tau=None):
    """Sampling variance of the observed inflation estimate.

    ``2/p`` scaled by ``((alpha_prior*tau + p)/tau)**2`` when ``tau`` is
    given, i.e. by the squared ratio of expected innovation variance to
    background spread under the prior factor.
    """
    v = 2.0 / p_local
    if tau is not None and alpha_prior is not None:
        v *= ((alpha_prior * tau + p_local) / tau) ** 2
    return v


def update_inflation_field(alpha_prior, alpha_hat, p_local, v_alpha, tau=None, bounds=(0.9, 10.0)):
    """Gaussian combination of prior and observed factors (arrays or scalars).

    ``alpha_prior + g (alpha_hat - alpha_prior)`` with gain
    ``g = v_alpha / (v_alpha + v_obs)``.  Entries with ``p_local <= 0`` keep
    the prior.
    """
    a0 = np.asarray(alpha_prior, dtype=np.float64)
    ah = np.asarray(alpha_hat, dtype=np.float64)
    p = np.asarray(p_local, dtype=np.float64)
    has = p > 0
    safe_p = np.where(has, p, 1.0)
    if tau is None:
        v_obs = observation_variance(safe_p)
    else:
        t = np.asarray(tau, dtype=np.float64)
        has = has & (t > 0)
        v_obs = observation_variance(safe_p, a0, np.where(t > 0, t, 1.0))
    gain = v_alpha / (v_alpha + v_obs)
    out = np.where(has, np.clip(a0 + gain * (ah - a0), *bounds), a0)
    return float(out) if out.ndim == 0 else out


def _column_weights(grid, batch, L_h, L_v):
    """Localization weights (n_columns, p) for each analysis level.

    Distances are evaluated once per distinct observation position and
    level, then expanded to records.
    """
    if batch.p == 0:
        return [np.zeros((grid.n_columns, 0)) for _ in grid.levels]
    lat_c, lon_c = grid.column_coords()
    pos, pos_inv = np.unique(np.stack([batch.lat, batch.lon], axis=1), axis=0, return_inverse=True)
    lev, lev_inv = np.unique(batch.level_hpa, return_inverse=True)
    pos_inv, lev_inv = pos_inv.reshape(-1), lev_inv.reshape(-1)
    d_h = np.asarray(horizontal_distance(grid, lat_c[:, None], lon_c[:, None], pos[None, :, 0], pos[None, :, 1]))
    d_h = d_h.reshape(grid.n_columns, len(pos))
    out = []
    for p_k in grid.levels:
        d_v = vertical_distance(p_k, lev)
        w = np.asarray(localization_weight(d_h[:, :, None], d_v[None, None, :], L_h, L_v))
        out.append(w[:, pos_inv, lev_inv])
    return out


@dataclass
class UpdateStats:
    p: int
    columns_with_obs: int
    mean_p_local: float
    alpha_mean: float


def letkf_update(Xb, batch, config, alpha_field=None, grid=None, workers=1):
    """Analyse every (column, level) of ``Xb`` against ``batch``.

    Returns ``(Xa, alpha_field, stats)``.  The batch is put in canonical
    order first, so the result does not depend on record order; work is
    split into fixed chunks of columns, so it does not depend on
    ``workers`` either.
    """
    grid = grid or Xb.grid
    if grid is None:
        raise GridMismatchError("background ensemble carries no grid")
    xb = Xb.members
    if xb.shape[0] != grid.size:
        raise GridMismatchError(f"ensemble n={xb.shape[0]} but grid size {grid.size}")
    n, m = xb.shape
    if not np.all(np.isfinite(xb)):
        raise NonFiniteStateError("background ensemble contains non-finite values")
    if alpha_field is None:
        alpha_field = InflationField.constant(
            grid, config.alpha_fixed if config.inflation == "fixed" else config.alpha_init
        )
    alpha = alpha_field.columns.copy()
    if config.inflation == "fixed":
        alpha[:] = config.alpha_fixed

    if batch.p == 0:
        if np.all(alpha == 1.0):
            stats = UpdateStats(0, 0, 0.0, InflationField(grid, alpha).mean())
            return EnsembleState(xb, time=Xb.time, grid=grid), InflationField(grid, alpha), stats

    batch = batch.sorted()
    if np.any(batch.error_sd <= 0):
        raise ValueError("observation error SDs must be positive for assimilation")
    xbar = xb.mean(axis=1)
    dX = xb - xbar[:, None]
    if batch.p:
        obs_idx = batch_state_indices(grid, batch)
        Y = dX[obs_idx]
        d = batch.values - xbar[obs_idx]
        rvar = batch.error_sd**2
    else:
        Y = np.empty((0, m))
        d = rvar = np.empty(0)

    n_lev = len(grid.levels)
    weights = _column_weights(grid, batch, config.L_h, config.L_v)

    if config.inflation == "adaptive" and batch.p:
        u_num = d**2 / rvar
        u_tau = np.sum(Y**2, axis=1) / (m - 1) / rvar
        num = sum(w @ u_num for w in weights) / n_lev
        tau = sum(w @ u_tau for w in weights) / n_lev
        p_eff = sum(w.sum(axis=1) for w in weights) / n_lev
        ok = (p_eff > 0) & (tau > 0)
        a_hat = np.where(ok, (num - p_eff) / np.where(ok, tau, 1.0), alpha)
        if config.clamp_estimate:
            a_hat = np.clip(a_hat, *config.bounds)
        alpha = update_inflation_field(
            alpha, a_hat, np.where(ok, p_eff, 0.0), config.v_alpha, tau=tau, bounds=config.bounds
        )

    Xa = np.empty_like(xb)
    tasks = [
        (k, np.arange(s, min(s + CHUNK, grid.n_columns)))
        for k in range(n_lev)
        for s in range(0, grid.n_columns, CHUNK)
    ]
    level_vars = [[v for v in grid.variables if k < grid.n_levels(v)] for k in range(n_lev)]

    def run(task):
        k, cols = task
        wk = weights[k][cols]
        # local obs of each column, left-packed in batch order and zero-padded
        rows, idx = np.nonzero(wk > 0)
        counts = np.bincount(rows, minlength=cols.size)
        P = int(counts.max()) if counts.size else 0
        slot = np.arange(rows.size) - (np.cumsum(counts) - counts)[rows]
        order = np.zeros((cols.size, P), dtype=np.int64)
        order[rows, slot] = idx
        rinv = np.zeros((cols.size, P))
        rinv[rows, slot] = wk[rows, idx] / rvar[idx]
        dg = np.zeros((cols.size, P))
        dg[rows, slot] = d[idx]
        Yg = Y[order] if P else np.zeros((cols.size, 0, m))
        a = alpha[cols]
        wbar, W, _ = _transform(Yg, rinv, dg, a, with_pa=False)
        T = wbar[:, :, None] + W
        keep = (counts == 0) & (a == 1.0)
        for v in level_vars[k]:
            comps = grid.field_indices(v, k)[cols]
            xa = xbar[comps, None] + (dX[comps][:, None, :] @ T)[:, 0, :]
            xa[keep] = xb[comps[keep]]
            bad = ~np.all(np.isfinite(xa), axis=1)
            if bad.any():
                col = int(cols[np.argmax(bad)])
                raise AnalysisBlewUpError(f"non-finite analysis in column {col}", column=col)
            Xa[comps] = xa
        return counts

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            counts = list(pool.map(run, tasks))
    else:
        counts = [run(t) for t in tasks]

    field_out = InflationField(grid, alpha)
    per_col = np.zeros(grid.n_columns)
    for (k, cols), c in zip(tasks, counts):
        if k == 0:
            per_col[cols] = c
    stats = UpdateStats(
        p=int(batch.p),
        columns_with_obs=int(np.sum(per_col > 0)),
        mean_p_local=float(per_col.mean()),
        alpha_mean=field_out.mean(),
    )
    return EnsembleState(Xa, time=Xb.time, grid=grid), field_out, stats
