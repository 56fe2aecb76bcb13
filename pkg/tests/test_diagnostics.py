import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from letkflab.diagnostics import (
    CycleRecord,
    MaeDiffAccumulator,
    climatological_rmse,
    cycle_records,
    detect_divergence,
    ensemble_spread,
    mae_diff,
    read_records,
    rmse,
    write_mae_diff,
    write_records,
)
from letkflab.errors import DegenerateEnsembleError, NoDataError, ShapeMismatchError, TimeMismatchError
from letkflab.grid import Grid, area_weights

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_rmse_examples():
    x = np.random.default_rng(0).normal(size=50)
    assert rmse(x, x) == 0.0
    assert rmse(x + 2.5, x) == pytest.approx(2.5)
    assert rmse(x - 2.5, x, np.full(50, 1 / 50)) == pytest.approx(2.5)


def test_rmse_two_pass_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=200), rng.normal(size=200)
    oracle = math.sqrt(math.fsum((p - q) ** 2 for p, q in zip(a, b)) / 200)
    assert abs(rmse(a, b) - oracle) < 1e-14


def test_rmse_area_weighted():
    g = Grid(n_lon=4, n_lat=6, variables=("T",), levels=(500.0,))
    err = np.zeros(g.size)
    err[:4] = 1.0  # polar row only
    w = area_weights(g)
    cos = np.cos(np.deg2rad(g.lats))
    assert rmse(err, np.zeros(g.size), w) == pytest.approx(math.sqrt(cos[0] / cos.sum()))


def test_rmse_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        rmse(np.zeros(3), np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 7, elements=finite), arrays(np.float64, 7, elements=finite))
def test_rmse_symmetric(a, b):
    assert rmse(a, b) == rmse(b, a)
    assert rmse(a, a) == 0.0


def test_spread_examples():
    assert ensemble_spread(np.ones((4, 5))) == 0.0
    assert ensemble_spread(np.array([[-1.0, 1.0]])) == pytest.approx(math.sqrt(2.0))
    with pytest.raises(DegenerateEnsembleError):
        ensemble_spread(np.ones((3, 1)))


def test_spread_monte_carlo():
    X = np.random.default_rng(2).normal(size=(1000, 20))
    assert abs(ensemble_spread(X) - 1.0) < 0.2


def test_mae_diff_examples():
    rng = np.random.default_rng(3)
    a, t = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    assert not mae_diff(a, a, t).values.any()
    res = mae_diff(t, t + 1.0, t)
    assert np.allclose(res.values, -1.0) and res.n_t == 5


def test_mae_diff_errors():
    with pytest.raises(TimeMismatchError):
        mae_diff(np.zeros((3, 2)), np.zeros((4, 2)), np.zeros((3, 2)))
    with pytest.raises(NoDataError):
        mae_diff(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(NoDataError):
        MaeDiffAccumulator(2).result()


def test_mae_accumulator_matches_batch():
    rng = np.random.default_rng(4)
    a, b, t = (rng.normal(size=(9, 5)) for _ in range(3))
    acc = MaeDiffAccumulator(5)
    for i in range(9):
        acc.add(a[i], b[i], t[i])
    assert np.allclose(acc.result().values, mae_diff(a, b, t).values, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_mae_diff_antisymmetric(seed):
    a, b, t = np.random.default_rng(seed).normal(size=(3, 4, 6))
    assert np.array_equal(mae_diff(a, b, t).values, -mae_diff(b, a, t).values)


def test_divergence_flat_low():
    rep = detect_divergence(np.full(100, 0.2), window=10, factor=0.9, baseline=3.0)
    assert not rep.diverged and rep.onset is None
    assert rep.threshold == pytest.approx(2.7)


@pytest.mark.parametrize("k", [15, 40, 77])
def test_divergence_ramp(k):
    r = np.full(100, 0.3)
    r[k:] = 0.3 + 0.5 * np.arange(1, 101 - k)
    rep = detect_divergence(r, window=10, factor=0.9, baseline=3.0)
    assert rep.diverged and k <= rep.onset <= k + 10


def test_divergence_ignores_partial_windows():
    # a spin-up spike only dominates windows shorter than ``window``
    r = np.concatenate([[20.0], np.full(50, 0.3)])
    assert not detect_divergence(r, window=10, baseline=3.0).diverged


def test_divergence_non_finite_counts():
    r = np.full(30, 0.3)
    r[20] = np.nan
    assert detect_divergence(r, window=5, baseline=3.0).onset == 20


def test_climatological_rmse():
    t = np.array([[1.0, 1.0], [-1.0, -1.0]])
    assert climatological_rmse(t) == pytest.approx(1.0)


def test_area_weight_sum():
    for g in (Grid(), Grid(n_lon=5, n_lat=3)):
        assert abs(area_weights(g).sum() - 1.0) <= 1e-12


def test_cycle_records_and_csv(tmp_path):
    g = Grid(n_lon=4, n_lat=2, levels=(850.0, 500.0), variables=("T", "Ps"))
    rng = np.random.default_rng(5)
    xa, xb, truth = rng.normal(size=(g.size, 3)), rng.normal(size=(g.size, 3)), rng.normal(size=g.size)
    recs = cycle_records(4, g, xa, xb, truth, 1.25, diverged={("T", 1): True})
    assert [(r.variable, r.level) for r in recs] == [("T", 0), ("T", 1), ("Ps", 0)]
    idx = g.field_indices("T", 1)
    assert recs[1].rmse_an == pytest.approx(rmse(xa[idx].mean(axis=1), truth[idx], area_weights(g)))
    assert recs[1].diverged and not recs[0].diverged
    with open(tmp_path / "r.csv", "w", newline="") as fh:
        write_records(fh, recs, header=True)
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == (
        "cycle,variable,level,rmse_an,rmse_fg,spread,alpha_mean,diverged"
    )
    assert read_records(tmp_path / "r.csv") == recs


def test_cycle_record_row():
    r = CycleRecord(3, "X", 0, 0.5, 1.0, 0.25, 1.1, False)
    assert r.row() == [3, "X", 0, "0.5", "1.0", "0.25", "1.1", 0]


def test_mae_diff_csv(tmp_path):
    g = Grid(n_lon=3, n_lat=2)
    write_mae_diff(tmp_path / "m.csv", g, np.arange(6.0))
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "lat_idx,lon_idx,mae_diff"
    assert lines[4] == "1,0,3.0"
