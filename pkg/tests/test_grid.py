import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from letkflab.errors import (
    DegenerateEnsembleError,
    EmptyEnsembleError,
    IndexOutOfBoundsError,
    InvalidLevelError,
)
from letkflab.grid import (
    DEFAULT_LEVELS,
    EnsembleState,
    Grid,
    area_weights,
    ensemble_mean,
    ensemble_perturbations,
    read_snapshot,
    sample_covariance,
    state_index,
    state_locate,
    write_snapshot,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_default_grid_size():
    g = Grid()
    # five 7-level fields plus surface pressure on 64 x 32 columns
    assert g.size == 64 * 32 * (5 * 7 + 1)
    assert g.levels == DEFAULT_LEVELS


def test_cyclic_grid_is_one_dimensional():
    g = Grid.cyclic(40)
    assert g.size == 40
    assert g.fields() == [("X", 0)]


def test_mean_of_identical_members():
    v = np.array([1.0, -2.0, 3.5])
    assert np.array_equal(ensemble_mean(np.stack([v, v], axis=1)), v)


def test_mean_two_members():
    assert ensemble_mean(np.array([[1.0, 3.0]])) == pytest.approx([2.0])


def test_mean_random_matches_column_sum():
    x = np.random.default_rng(1).normal(size=(4, 20))
    oracle = np.array([sum(row) / 20 for row in x.tolist()])
    assert np.max(np.abs(ensemble_mean(x) - oracle)) < 1e-14


def test_mean_of_empty_ensemble():
    with pytest.raises(EmptyEnsembleError):
        ensemble_mean(np.empty((3, 0)))


def test_perturbations_simple():
    assert np.array_equal(ensemble_perturbations(np.array([[1.0, 3.0]])), [[-1.0, 1.0]])


def test_perturbations_identical_members():
    x = np.tile(np.array([[2.0], [5.0]]), (1, 4))
    assert not ensemble_perturbations(x).any()


def test_perturbations_row_sums():
    x = np.random.default_rng(2).normal(size=(6, 10))
    assert np.max(np.abs(ensemble_perturbations(x).sum(axis=1))) < 1e-12


def test_perturbations_need_two_members():
    with pytest.raises(DegenerateEnsembleError):
        ensemble_perturbations(np.ones((3, 1)))


def test_covariance_two_members():
    assert np.array_equal(sample_covariance(np.array([[-1.0, 1.0]])), [[2.0]])


def test_covariance_zero():
    assert not sample_covariance(np.zeros((3, 5))).any()


def test_covariance_matches_two_pass():
    x = np.random.default_rng(3).normal(size=(3, 20))
    mean = [sum(r) / 20 for r in x.tolist()]
    oracle = np.array(
        [[sum((x[i, k] - mean[i]) * (x[j, k] - mean[j]) for k in range(20)) / 19 for j in range(3)] for i in range(3)]
    )
    got = sample_covariance(ensemble_perturbations(x))
    assert np.max(np.abs(got - oracle)) < 1e-12
    assert np.allclose(got, np.cov(x))


def test_covariance_degenerate():
    with pytest.raises(DegenerateEnsembleError):
        sample_covariance(np.ones((2, 1)))


def test_state_index_origin_and_cyclic():
    assert state_index(Grid(), "U", 0, 0, 0) == 0
    assert state_index(Grid.cyclic(40), "X", 0, 0, 7) == 7


def test_state_index_round_trip_exhaustive():
    g = Grid(n_lon=8, n_lat=4, levels=(850.0, 500.0))
    seen = set()
    for v, k in g.fields():
        for a in range(g.n_lat):
            for b in range(g.n_lon):
                i = state_index(g, v, k, a, b)
                assert state_locate(g, i) == (v, k, a, b)
                seen.add(i)
    assert seen == set(range(g.size))
    for i in range(g.size):
        assert state_index(g, *state_locate(g, i)) == i


def test_state_index_errors():
    g = Grid(n_lon=8, n_lat=4)
    with pytest.raises(IndexOutOfBoundsError):
        state_index(g, "U", 0, 4, 0)
    with pytest.raises(InvalidLevelError):
        state_index(g, "Ps", 1, 0, 0)
    with pytest.raises(IndexOutOfBoundsError):
        state_locate(g, g.size)


def test_field_indices_are_contiguous():
    g = Grid(n_lon=8, n_lat=4)
    idx = g.field_indices("T", 3)
    assert np.array_equal(idx, np.arange(idx[0], idx[0] + 32))
    assert idx[0] == state_index(g, "T", 3, 0, 0)


def test_area_weights_normalised():
    for g in (Grid(), Grid(n_lon=8, n_lat=4), Grid.cyclic(40)):
        for weighted in (True, False):
            assert abs(area_weights(g, weighted).sum() - 1.0) < 1e-12


def test_area_weights_cosine():
    g = Grid(n_lon=4, n_lat=6)
    w = area_weights(g).reshape(6, 4)
    assert w[3, 0] > w[5, 0]
    assert w[0, 0] == pytest.approx(w[5, 0])


def test_ensemble_state_is_read_only():
    X = EnsembleState(np.ones((3, 2)))
    with pytest.raises(ValueError):
        X.members[0, 0] = 2.0


def test_snapshot_round_trip(tmp_path):
    g = Grid(n_lon=8, n_lat=4)
    x = np.random.default_rng(4).normal(size=(g.size, 3))
    hdr = write_snapshot(tmp_path / "snap", x, g, time=7)
    X, header = read_snapshot(hdr)
    assert np.array_equal(X.members, x)
    assert X.time == 7 and X.grid == g
    assert header["byte_order"] == "little" and header["layout"] == "column-major"


def test_snapshot_byte_layout(tmp_path):
    # column-major: member 0 first, then member 1
    x = np.array([[1.0, 4.0], [2.0, 5.0], [3.0, 6.0]])
    write_snapshot(tmp_path / "s", x)
    raw = (tmp_path / "s.bin").read_bytes()
    assert np.array_equal(np.frombuffer(raw, dtype="<f8"), [1, 2, 3, 4, 5, 6])
    assert not list(tmp_path.glob("*.tmp"))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 12)), elements=finite))
def test_centering_property(x):
    dX = ensemble_perturbations(x)
    assert np.all(np.abs(dX.sum(axis=1)) <= 1e-12 * max(1.0, np.max(np.abs(x))) * x.shape[1])
    assert np.allclose(ensemble_mean(x)[:, None] + dX, x, rtol=0, atol=1e-12 * max(1.0, np.max(np.abs(x))))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 12)), elements=finite))
def test_covariance_psd_property(x):
    P = sample_covariance(ensemble_perturbations(x))
    assert np.allclose(P, P.T)
    lam = np.linalg.eigvalsh(P)
    assert lam.min() >= -1e-10 * max(np.trace(P), 1e-300)
    assert np.linalg.matrix_rank(P) <= x.shape[1] - 1


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.data())
def test_bijection_property(n_lon, n_lat, data):
    g = Grid(n_lon=n_lon, n_lat=n_lat, levels=(900.0, 500.0, 100.0))
    k = data.draw(st.integers(0, g.size - 1))
    assert state_index(g, *state_locate(g, k)) == k
