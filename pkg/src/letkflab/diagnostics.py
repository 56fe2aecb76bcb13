"""Verification against truth: RMSE, spread, MAE differences, divergence."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateEnsembleError, NoDataError, ShapeMismatchError, TimeMismatchError
from .grid import EnsembleState, area_weights

RECORD_HEADER = ["cycle", "variable", "level", "rmse_an", "rmse_fg", "spread", "alpha_mean", "diverged"]


def rmse(field, truth, weights=None):
    """Root mean square difference; ``weights`` (summing to one) default to uniform."""
    a = np.asarray(field, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shapes {a.shape} and {b.shape} differ")
    sq = (a - b) ** 2
    if weights is None:
        return float(np.sqrt(np.mean(sq)))
    return float(np.sqrt(np.asarray(weights) @ sq))


def ensemble_spread(X, weights=None):
    """Weighted mean over components of the per-component ensemble SD."""
    x = X.members if isinstance(X, EnsembleState) else np.asarray(X, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise DegenerateEnsembleError("spread needs at least two members")
    sd = np.sqrt(np.sum((x - x.mean(axis=1, keepdims=True)) ** 2, axis=1) / (x.shape[1] - 1))
    if weights is None:
        return float(sd.mean())
    return float(np.asarray(weights) @ sd)


@dataclass
class MaeDiffField:
    values: np.ndarray
    n_t: int


def mae_diff(analysis_means, background_means, truths):
    """Time mean of |analysis - truth| - |background - truth|, per component.

    Inputs are sequences (or arrays) with time on the first axis.
    Negative values mean the analysis improved on the first guess.
    """
    a = np.asarray(analysis_means, dtype=np.float64)
    b = np.asarray(background_means, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if not (a.shape == b.shape == t.shape):
        raise TimeMismatchError(f"series shapes differ: {a.shape}, {b.shape}, {t.shape}")
    if a.shape[0] < 1:
        raise NoDataError("no samples in the verification window")
    return MaeDiffField(values=np.mean(np.abs(a - t) - np.abs(b - t), axis=0), n_t=a.shape[0])


class MaeDiffAccumulator:
    """Streaming form of :func:`mae_diff`."""

    def __init__(self, n):
        self.total = np.zeros(n)
        self.n_t = 0

    def add(self, analysis_mean, background_mean, truth):
        self.total += np.abs(analysis_mean - truth) - np.abs(background_mean - truth)
        self.n_t += 1

    def result(self):
        if self.n_t == 0:
            raise NoDataError("no samples accumulated")
        return MaeDiffField(self.total / self.n_t, self.n_t)


@dataclass
class DivergenceReport:
    diverged: bool
    onset: int | None
    threshold: float
    window: int


def detect_divergence(rmse_series, spread_series=None, window=10, factor=0.9, baseline=1.0):
    """Flag the first cycle whose trailing ``window``-mean RMSE exceeds ``factor * baseline``.

    Only full windows count, so the spin-up transient from a climatological
    initial ensemble is not mistaken for divergence.  ``spread_series`` is
    accepted for reporting symmetry but does not enter the criterion.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    r = np.asarray(rmse_series, dtype=np.float64)
    threshold = factor * baseline
    if r.size == 0:
        return DivergenceReport(False, None, threshold, window)
    c = np.concatenate(([0.0], np.cumsum(np.where(np.isfinite(r), r, np.inf))))
    idx = np.arange(1, r.size + 1)
    lo = np.maximum(idx - window, 0)
    with np.errstate(invalid="ignore"):
        mean = (c[idx] - c[lo]) / (idx - lo)
    hit = np.flatnonzero(~(mean <= threshold) & (idx >= min(window, r.size)))
    if hit.size == 0:
        return DivergenceReport(False, None, threshold, window)
    return DivergenceReport(True, int(hit[0]), threshold, window)


def climatological_rmse(truths, weights=None):
    """RMSE of the time-mean state against the truth series.

    This is what the ensemble mean of a long no-assimilation run tends to.
    """
    t = np.asarray(truths, dtype=np.float64)
    clim = t.mean(axis=0)
    return float(np.sqrt(np.mean([rmse(x, clim, weights) ** 2 for x in t])))


@dataclass
class CycleRecord:
    cycle: int
    variable: str
    level: int
    rmse_an: float
    rmse_fg: float
    spread: float
    alpha_mean: float
    diverged: bool

    def row(self):
        return [
            self.cycle, self.variable, self.level, repr(self.rmse_an), repr(self.rmse_fg),
            repr(self.spread), repr(self.alpha_mean), int(self.diverged),
        ]


def cycle_records(cycle, grid, xa, xb, truth, alpha_mean, diverged=None, weighted=True):
    """Per-field records for one cycle; ``xa``/``xb`` are (n, m) ensembles."""
    w = area_weights(grid, weighted)
    an_mean, fg_mean = xa.mean(axis=1), xb.mean(axis=1)
    out = []
    for v, k in grid.fields():
        idx = grid.field_indices(v, k)
        out.append(
            CycleRecord(
                cycle, v, k,
                rmse(an_mean[idx], truth[idx], w),
                rmse(fg_mean[idx], truth[idx], w),
                ensemble_spread(xa[idx], w),
                alpha_mean,
                bool(diverged.get((v, k), False)) if diverged else False,
            )
        )
    return out


def write_records(fh, records, header=False):
    w = csv.writer(fh)
    if header:
        w.writerow(RECORD_HEADER)
    for r in records:
        w.writerow(r.row())


def read_records(path):
    """Records from a CSV; a trailing line without newline (interrupted write) is dropped."""
    with open(path, newline="") as fh:
        text = fh.read()
    lines = text.splitlines(keepends=True)
    if lines and not lines[-1].endswith("\n"):
        lines.pop()
    out = []
    for row in csv.DictReader(lines):
        out.append(
            CycleRecord(
                int(row["cycle"]), row["variable"], int(row["level"]),
                float(row["rmse_an"]), float(row["rmse_fg"]), float(row["spread"]),
                float(row["alpha_mean"]), bool(int(row["diverged"])),
            )
        )
    return out


def write_mae_diff(path, grid, field_values):
    vals = np.asarray(field_values).reshape(grid.n_lat, grid.n_lon)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lat_idx", "lon_idx", "mae_diff"])
        for (a, b), v in np.ndenumerate(vals):
            w.writerow([a, b, repr(float(v))])
