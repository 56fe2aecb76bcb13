"""End-to-end acceptance checks, one PASS/FAIL line per criterion."""
import time

import numpy as np
import pytest

import test_config
import test_diagnostics
import test_grid
import test_letkf
import test_models
import test_observations
from conftest import ACCEPTANCE_LINES
from letkflab import config as cfgmod
from letkflab import experiment
from letkflab.diagnostics import mae_diff, read_records
from letkflab.grid import EnsembleState, Grid, read_snapshot, sample_covariance
from letkflab.letkf import CUTOFF_FACTOR, LetkfConfig, letkf_update, local_analysis, localization_weight
from letkflab.observations import ObservationBatch, read_network


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def _field_series(path, variable, level):
    recs = [r for r in read_records(path) if r.variable == variable and r.level == level]
    return np.array([r.rmse_an for r in recs]), np.array([r.rmse_fg for r in recs]), np.array([r.alpha_mean for r in recs])


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def l96_twin(root):
    """The Lorenz-96 preset (m=20, every site observed, adaptive inflation, 2000 cycles)."""
    out = {}
    for name, extra in [("assim", ["workers=1"]), ("assim8", ["workers=8"]), ("free", ["free_run=true"])]:
        c = cfgmod.apply_overrides(cfgmod.preset("lorenz96"), extra + [f"output_dir={root / ('c3_' + name)}"])
        t0 = time.perf_counter()
        experiment.run_all(c)
        out[name] = (root / f"c3_{name}", time.perf_counter() - t0)
    return out


SWEEP_VALUES = [2.0, 4.0, 8.0, float("inf")]


@pytest.fixture(scope="module")
def l96_sweep(root):
    """m=10, 20 of 40 sites observed, localization half-width sweep."""
    c = cfgmod.apply_overrides(
        cfgmod.preset("lorenz96"),
        ["ensemble_size=10", "network.n_stations=20", "n_cycles=1500", "letkf.alpha_max=2.0",
         f"output_dir={root / 'c4_sweep'}"],
    )
    t0 = time.perf_counter()
    summary = experiment.run_sweep(c, "letkf.L_h", SWEEP_VALUES)
    return c, summary, time.perf_counter() - t0


def test_criterion_1_kalman_filter_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    X = rng.normal(size=(3, 5))
    xbar = X.mean(axis=1)
    dX = X - xbar[:, None]
    H = np.array([[1.0, 0.0, 0.0], [0.5, 0.0, 0.5]])
    R = np.diag([0.4, 0.9])
    y = rng.normal(size=2)
    res = local_analysis(xbar, dX, H @ dX, y - H @ xbar, np.diag(R), np.ones(2), alpha=1.0)
    Pb = sample_covariance(dX)
    K = Pb @ H.T @ np.linalg.inv(H @ Pb @ H.T + R)
    xa_kf = xbar + K @ (y - H @ xbar)
    Pa_kf = (np.eye(3) - K @ H) @ Pb
    e_mean = np.linalg.norm(res.analysis.mean(axis=1) - xa_kf) / np.linalg.norm(xa_kf)
    e_cov = np.linalg.norm(np.cov(res.analysis) - Pa_kf) / np.linalg.norm(Pa_kf)
    dt = time.perf_counter() - t0
    report(1, e_mean < 1e-8 and e_cov < 1e-8 and dt < 1.0,
           f"mean rel err {e_mean:.1e}, covariance rel err {e_cov:.1e}, {dt:.3f} s")


def test_criterion_2_identity_cases(l96_twin):
    g = Grid(n_lon=16, n_lat=8)
    Xb = EnsembleState(np.random.default_rng(3).normal(size=(g.size, 6)), grid=g)
    Xa, _, _ = letkf_update(Xb, ObservationBatch.empty(), LetkfConfig(inflation="fixed"))
    identical = Xa.members.tobytes() == Xb.members.tobytes()
    worst = 0.0
    ens = l96_twin["assim"][0] / "cycle" / "ens"
    for path in sorted(ens.glob("an_*.json")):
        dXa = read_snapshot(path)[0].members
        dXa = dXa - dXa.mean(axis=1, keepdims=True)
        worst = max(worst, np.max(np.abs(dXa.sum(axis=1))) / np.max(np.abs(dXa)))
    w0 = localization_weight(0.0, 0.0, 600.0, 1.0)
    w_cut = localization_weight(CUTOFF_FACTOR * 600.0, 0.0, 600.0, 1.0)
    ok = identical and worst <= 1e-10 and w0 == 1.0 and w_cut == 0.0
    report(2, ok, f"zero-obs bit-identical={identical}, max perturbation sum {worst:.1e}, weights {w0}/{w_cut}")


def test_criterion_3_lorenz96_twin(l96_twin):
    path, secs = l96_twin["assim"]
    an, _, _ = _field_series(path / "cycle" / "records.csv", "X", 0)
    free, _, _ = _field_series(l96_twin["free"][0] / "cycle" / "records.csv", "X", 0)
    a, f = an[-1000:].mean(), free[-1000:].mean()
    ok = a < 0.5 and a < 0.2 * f and secs < 120
    report(3, ok, f"analysis RMSE {a:.3f} (last 1000 cycles), free run {f:.3f}, ratio {a / f:.3f}, {secs:.0f} s")


def test_criterion_4_localization_sweep(root, l96_sweep):
    config, summary, secs = l96_sweep
    rows = experiment.read_sweep(summary)
    an = np.array([float(r["rmse_an"]) for r in rows])
    fg = np.array([float(r["rmse_fg"]) for r in rows])
    best = int(np.argmin(an))
    interior = 0 < best < len(an) - 1
    widest_degrades = an[-1] > fg[-1]
    c = cfgmod.apply_overrides(
        cfgmod.preset("lorenz96"),
        ["ensemble_size=5", "letkf.inflation=fixed", "letkf.L_h=inf", "network.n_stations=20",
         "n_cycles=500", f"output_dir={root / 'c4_divergent'}"],
    )
    t0 = time.perf_counter()
    experiment.run_all(c)
    div = experiment.run_diagnose(c.output_path())
    secs += time.perf_counter() - t0
    ok = interior and widest_degrades and div["diverged"] and secs < 300
    curve = ", ".join(f"{v:g}:{x:.3f}" for v, x in zip(SWEEP_VALUES, an))
    report(4, ok, f"AN RMSE by half-width {{{curve}}}, widest AN {an[-1]:.2f} vs FG {fg[-1]:.2f}, "
                  f"m=5 divergence onset cycle {div['fields']['X:0']['onset']}, {secs:.0f} s")


def test_criterion_5_inflation_response(root):
    alphas, secs = {}, 0.0
    for damping in (0.0, 0.3):
        c = cfgmod.apply_overrides(
            cfgmod.preset("global"),
            ["grid.n_lon=32", "grid.n_lat=16", "grid.variables=[U,V,T,Ps]", "network.n_stations=100",
             "n_cycles=80", "letkf.L_h=800", "letkf.L_v=0.3", f"model.params.damping={damping}",
             "model.truth_params.damping=0.0", "keep_every=1000", f"output_dir={root / f'c5_{damping}'}"],
        )
        t0 = time.perf_counter()
        experiment.run_all(c)
        secs += time.perf_counter() - t0
        _, _, alpha = _field_series(c.output_path() / "cycle" / "records.csv", "U", 0)
        alphas[damping] = alpha[len(alpha) // 2:].mean()
    margin = alphas[0.3] - alphas[0.0]
    ok = margin > 0 and secs < 300
    report(5, ok, f"converged mean alpha {alphas[0.0]:.3f} undamped vs {alphas[0.3]:.3f} damped "
                  f"(margin {margin:.3f}), {secs:.0f} s")


def test_criterion_6_mae_diff(l96_sweep):
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[2.0, 2.0], [1.0, 5.0]])
    t = np.zeros((2, 2))
    # |a| - |b| = [[-1, 0], [2, -1]] -> column means [0.5, -0.5]
    exact = np.array_equal(mae_diff(a, b, t).values, [0.5, -0.5])
    config, _, _ = l96_sweep
    point = config.output_path() / "point_001"  # half-width 4
    grid = config.build_grid()
    field = experiment.read_mae_diff(point / "diagnose" / "mae_diff_X_0.csv", grid).reshape(-1)
    stations = [b for _, b in read_network(point / "obs" / "network.csv", grid).stations]
    others = np.setdiff1d(np.arange(grid.n_lon), stations)
    at_st, off_st = field[stations].mean(), field[others].mean()
    ok = exact and at_st < 0
    report(6, ok, f"hand-computed example exact={exact}, mean MAE_diff at stations {at_st:.4f}, "
                  f"elsewhere {off_st:.4f}")


def test_criterion_7_determinism(l96_twin):
    one = (l96_twin["assim"][0] / "cycle" / "records.csv").read_bytes()
    eight = (l96_twin["assim8"][0] / "cycle" / "records.csv").read_bytes()
    report(7, one == eight, f"records.csv with 1 and 8 workers byte-identical={one == eight} ({len(one)} bytes)")


PROPERTY_SUITES = [
    ("H linearity", test_observations.test_h_linearity),
    ("H matches brute force", test_observations.test_h_matches_brute_force_lookup),
    ("local obs permutation invariance", test_observations.test_select_permutation_invariant),
    ("symmetric_sqrt residual", test_letkf.test_sqrt_random_spd_residual),
    ("weight monotonicity", test_letkf.test_weight_monotone),
    ("great-circle metric", test_letkf.test_great_circle_metric),
    ("transform W1 = sqrt(alpha) 1", test_letkf.test_transform_properties),
    ("order invariance", lambda: test_letkf.test_observation_order_invariance("adaptive")),
    ("localization limit", test_letkf.test_localization_limit_ring),
    ("KF equivalence", lambda: test_letkf.test_dense_kalman_filter_equivalence(4)),
    ("RK4 convergence order", test_models.test_rk4_convergence_order),
    ("zonal-mean conservation", test_models.test_advection_conserves_zonal_mean),
    ("area-weight normalization", test_diagnostics.test_area_weight_sum),
    ("rmse symmetry", test_diagnostics.test_rmse_symmetric),
    ("mae_diff antisymmetry", test_diagnostics.test_mae_diff_antisymmetric),
    ("centering", test_grid.test_centering_property),
    ("covariance PSD", test_grid.test_covariance_psd_property),
    ("index bijection", test_grid.test_bijection_property),
    ("sampling without replacement", test_config.test_sample_without_replacement),
]


def test_criterion_8_property_suites():
    slow, failed = [], []
    for name, fn in PROPERTY_SUITES:
        t0 = time.perf_counter()
        try:
            fn()
        except Exception as exc:  # noqa: BLE001
            failed.append(f"{name}: {exc!r}")
        dt = time.perf_counter() - t0
        if dt >= 10.0:
            slow.append(f"{name} {dt:.1f} s")
    ok = not slow and not failed
    report(8, ok, f"{len(PROPERTY_SUITES) - len(failed)}/{len(PROPERTY_SUITES)} suites pass, "
                  f"over 10 s: {slow or 'none'}{'; ' + '; '.join(failed) if failed else ''}")
