"""Twin-experiment pipeline: nature run -> observations -> cycling -> diagnosis.

Directory layout under the experiment root::

    config.yaml  manifest.json
    nature/  truth_NNNNN.{json,bin}  pool.{json,bin}  trajectory.json
    obs/     network.csv  observations.csv
    cycle/   records.csv  an_mean.{json,bin}  fg_mean.{json,bin}
             ens/{an,fg}_NNNNN.{json,bin}  inflation/alpha_NNNNN.csv
    diagnose/ mae_diff_<var>_<level>.csv  divergence.json

``an_mean``/``fg_mean`` are snapshot files whose columns are cycles; the
binary part is appended every cycle, so a killed run still leaves every
completed cycle readable.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, rng
from . import config as cfgmod
from .diagnostics import (
    RECORD_HEADER,
    climatological_rmse,
    cycle_records,
    detect_divergence,
    mae_diff,
    read_records,
    rmse,
    write_mae_diff,
    write_records,
)
from .errors import (
    AnalysisBlewUpError,
    ConfigError,
    MissingInputError,
    ModelBlewUpError,
    NoDataError,
    NonFiniteStateError,
    SingularEnsembleSpaceError,
)
from .grid import EnsembleState, Grid, area_weights, read_snapshot, write_snapshot
from .letkf import letkf_update
from .models import build_model, forecast_ensemble, nature_run
from .observations import (
    ObservationBatch,
    ObsErrorTable,
    generate_network,
    observe_truth,
    read_network,
    read_observations,
    write_network,
    write_observations,
)

log = logging.getLogger(__name__)

MEMBER_SEPARATION = 50


# --- manifest ---------------------------------------------------------------

def _write_json_atomic(path, data):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def load_manifest(root):
    path = Path(root) / "manifest.json"
    if not path.exists():
        return {"config": None, "code_version": __version__, "stages": {}}
    return json.loads(path.read_text())


def update_manifest(root, config, stage, **info):
    root = Path(root)
    man = load_manifest(root)
    man["config"] = cfgmod.to_dict(config)
    man["code_version"] = __version__
    man["stages"][stage] = info
    _write_json_atomic(root / "manifest.json", man)
    return man


def prepare(config):
    root = config.output_path()
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.yaml").write_text(cfgmod.dumps(config))
    return root


def _models(config):
    grid = config.build_grid()
    try:
        assim = build_model(config.model.kind, grid, config.model.params)
        truth = build_model(
            config.model.kind, grid, {**config.model.params, **config.model.truth_params}
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad model parameters: {exc}") from exc
    return grid, assim, truth


# --- nature ------------------------------------------------------------------

def run_nature(config):
    root = prepare(config)
    grid, _, truth_model = _models(config)
    out = root / "nature"
    out.mkdir(exist_ok=True)
    try:
        traj = nature_run(truth_model, None, config.spinup_cycles, config.n_cycles, seed=config.seeds.nature)
    except ModelBlewUpError as exc:
        update_manifest(root, config, "nature", status="blew_up", cycle=exc.cycle)
        raise
    files = []
    for t, x in enumerate(traj.states):
        files.append(write_snapshot(out / f"truth_{t:05d}", x, grid, time=t).name)
    write_snapshot(out / "pool", traj.spinup.T if traj.spinup.size else np.empty((grid.size, 0)), grid,
                   time=-config.spinup_cycles, extra={"axis": "spinup-cycle"})
    w = area_weights(grid, config.weighted_rmse)
    clim = {
        f"{v}:{k}": climatological_rmse(traj.states[:, grid.field_indices(v, k)], w)
        for v, k in grid.fields()
    }
    meta = {
        "cycles": config.n_cycles,
        "spinup_cycles": config.spinup_cycles,
        "model": truth_model.name,
        "params": truth_model.params,
        "seed": config.seeds.nature,
        "files": files,
        "pool": "pool.json",
        "climatological_rmse": clim,
    }
    _write_json_atomic(out / "trajectory.json", meta)
    update_manifest(root, config, "nature", status="complete", files=["nature/trajectory.json", "nature/pool.json"] + [f"nature/{f}" for f in files])
    return [out / f for f in files]


def load_truth(root):
    root = Path(root)
    meta_path = root / "nature" / "trajectory.json"
    if not meta_path.exists():
        raise MissingInputError(f"no nature run in {root}")
    meta = json.loads(meta_path.read_text())
    states = [read_snapshot(root / "nature" / f)[0].members[:, 0] for f in meta["files"]]
    return np.array(states), meta


# --- observations ------------------------------------------------------------

def build_network(config, grid):
    if config.network.file:
        return read_network(config.network.file, grid)
    return generate_network(grid, config.network.n_stations, config.network.seed, config.network.layout)


def run_make_obs(config):
    root = prepare(config)
    truth, _ = load_truth(root)
    grid = config.build_grid()
    out = root / "obs"
    out.mkdir(exist_ok=True)
    net = build_network(config, grid)
    write_network(out / "network.csv", net)
    errors = ObsErrorTable(dict(config.obs_errors))
    scale = 0.0 if config.obs_noise_free else 1.0
    batches = [
        observe_truth(x, net, errors, seed=config.seeds.obs, time=t, noise_scale=scale)
        for t, x in enumerate(truth)
    ]
    write_observations(out / "observations.csv", batches)
    update_manifest(root, config, "make_obs", status="complete",
                    files=["obs/network.csv", "obs/observations.csv"],
                    records_per_cycle=net.size)
    return out / "observations.csv"


# --- cycling -------------------------------------------------------------------

def initial_ensemble(pool, m, seed):
    """m spinup states at least ``MEMBER_SEPARATION`` cycles apart (seeded)."""
    n_pool = pool.shape[1]
    slots = list(range(MEMBER_SEPARATION, n_pool, MEMBER_SEPARATION))
    if len(slots) < m:
        raise ConfigError(
            f"spinup of {n_pool} cycles gives {len(slots)} member slots; need {m} "
            f"(spinup_cycles >= {MEMBER_SEPARATION * (m + 1)})"
        )
    picks = sorted(rng.sample_without_replacement(seed, rng.ENSEMBLE, slots, m))
    return pool[:, picks]


class _SeriesWriter:
    """Appends one column per cycle to a snapshot-format file."""

    def __init__(self, path, grid):
        self.path, self.grid, self.count = Path(path), grid, 0
        self.bin = open(self.path.with_suffix(".bin"), "wb")
        self.header()

    def append(self, x):
        self.bin.write(np.asarray(x, dtype="<f8").tobytes())
        self.bin.flush()
        self.count += 1

    def header(self):
        header = {
            "format": "letkflab-snapshot", "version": 1, "grid": self.grid.to_dict(),
            "time": 0, "n": self.grid.size, "m": self.count, "dtype": "float64",
            "byte_order": "little", "layout": "column-major",
            "data_file": self.path.with_suffix(".bin").name, "extra": {"axis": "cycle"},
        }
        _write_json_atomic(self.path.with_suffix(".json"), header)

    def close(self):
        self.bin.close()
        self.header()


def read_series(path, grid):
    """Columns of an appended series; tolerates a header lagging the data."""
    raw = np.fromfile(Path(path).with_suffix(".bin"), dtype="<f8")
    k = raw.size // grid.size
    return raw[: k * grid.size].reshape(k, grid.size)


@dataclass
class CycleOutcome:
    status: str
    completed: int
    onset: int | None = None


def run_cycle(config):
    root = prepare(config)
    truth, meta = load_truth(root)
    obs_path = root / "obs" / "observations.csv"
    if not obs_path.exists():
        raise MissingInputError(f"no observations in {root / 'obs'}")
    grid, model, _ = _models(config)
    batches = read_observations(obs_path)
    pool = read_snapshot(root / "nature" / "pool")[0].members
    X = EnsembleState(initial_ensemble(pool, config.ensemble_size, config.seeds.ensemble), time=-1, grid=grid)
    baseline = meta["climatological_rmse"]
    win, factor = config.divergence.window, config.divergence.factor

    out = root / "cycle"
    for sub in ("ens", "inflation"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    an_series = _SeriesWriter(out / "an_mean", grid)
    fg_series = _SeriesWriter(out / "fg_mean", grid)
    alpha = None
    history = {f: [] for f in grid.fields()}
    outcome = CycleOutcome("complete", 0)
    update_manifest(root, config, "cycle", status="running", completed=0)
    n = min(config.n_cycles, len(truth))
    with open(out / "records.csv", "w", newline="") as fh:
        write_records(fh, [], header=True)
        fh.flush()
        for t in range(n):
            try:
                Xb = forecast_ensemble(model, X)
                Xb = EnsembleState(Xb.members, time=t, grid=grid)
                if config.free_run:
                    Xa, alpha_mean = Xb, 1.0
                else:
                    batch = batches.get(t, ObservationBatch.empty(t))
                    Xa, alpha, stats = letkf_update(Xb, batch, config.letkf, alpha, grid, workers=config.workers)
                    alpha_mean = stats.alpha_mean
            except (NonFiniteStateError, AnalysisBlewUpError, SingularEnsembleSpaceError, FloatingPointError) as exc:
                log.warning("cycle %d: %s", t, exc)
                outcome = CycleOutcome("blew_up", t, onset=t)
                break
            an_mean = Xa.members.mean(axis=1)
            recs = cycle_records(t, grid, Xa.members, Xb.members, truth[t], alpha_mean, None, config.weighted_rmse)
            for r in recs:
                h = history[(r.variable, r.level)]
                h.append(r.rmse_an)
                r.diverged = len(h) >= win and bool(np.mean(h[-win:]) > factor * baseline[f"{r.variable}:{r.level}"])
            write_records(fh, recs)
            fh.flush()
            an_series.append(an_mean)
            fg_series.append(Xb.members.mean(axis=1))
            if t % config.keep_every == 0 or t == n - 1:
                write_snapshot(out / "ens" / f"fg_{t:05d}", Xb.members, grid, time=t)
                write_snapshot(out / "ens" / f"an_{t:05d}", Xa.members, grid, time=t)
                if alpha is not None:
                    alpha.write_csv(out / "inflation" / f"alpha_{t:05d}.csv")
                an_series.header()
                fg_series.header()
                update_manifest(root, config, "cycle", status="running", completed=t + 1)
            X = Xa
            outcome.completed = t + 1
    an_series.close()
    fg_series.close()
    if alpha is not None:
        alpha.write_csv(out / "inflation" / "alpha_final.csv")
    update_manifest(root, config, "cycle", status=outcome.status, completed=outcome.completed,
                    onset=outcome.onset, files=["cycle/records.csv", "cycle/an_mean.json", "cycle/fg_mean.json"])
    if outcome.status == "blew_up":
        raise AnalysisBlewUpError(f"analysis blew up at cycle {outcome.onset}", cycle=outcome.onset)
    return outcome


def run_all(config):
    """nature -> make-obs -> cycle -> diagnose; returns the cycle outcome."""
    run_nature(config)
    run_make_obs(config)
    outcome = run_cycle(config)
    run_diagnose(config.output_path())
    return outcome


# --- sweep ---------------------------------------------------------------------

SWEEP_HEADER = ["point", "param", "value", "variable", "level", "rmse_an", "rmse_fg", "status"]


def verification_window(n_cycles, start_fraction=0.5):
    return int(np.floor(start_fraction * n_cycles)), n_cycles


def time_means(records, start, stop):
    out = {}
    for r in records:
        if start <= r.cycle < stop:
            out.setdefault((r.variable, r.level), []).append((r.rmse_an, r.rmse_fg))
    return {k: tuple(np.mean(np.array(v), axis=0)) for k, v in out.items()}


def _sweep_point(args):
    i, config_dict = args
    config = cfgmod.from_dict(config_dict)
    try:
        outcome = run_all(config)
        status = outcome.status
    except (AnalysisBlewUpError, ModelBlewUpError) as exc:
        status = f"blew_up:{getattr(exc, 'cycle', '')}"
    return i, status


def run_sweep(config, param, values, jobs=1):
    """Run the full pipeline per parameter value in ``<root>/point_NNN``.

    Returns the summary CSV path.  Failed points are recorded with their
    status and the sweep carries on.
    """
    root = prepare(config)
    grid = config.build_grid()
    points = []
    for i, value in enumerate(values):
        data = cfgmod.to_dict(config)
        cfgmod.set_path(data, param, value)
        data["output_dir"] = str(root / f"point_{i:03d}")
        data["name"] = f"{config.name}-{i:03d}"
        cfgmod.from_dict(data)
        points.append((i, data))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = dict(pool.map(_sweep_point, points))
    else:
        results = dict(map(_sweep_point, points))
    start, stop = verification_window(config.n_cycles, config.verification_start)
    summary = root / "sweep_summary.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for i, value in enumerate(values):
            rec_path = root / f"point_{i:03d}" / "cycle" / "records.csv"
            means = time_means(read_records(rec_path), start, stop) if rec_path.exists() else {}
            for v, k in grid.fields():
                an, fg = means.get((v, k), (float("nan"), float("nan")))
                w.writerow([i, param, value, v, k, repr(float(an)), repr(float(fg)), results[i]])
    update_manifest(root, config, "sweep", status="complete", param=param,
                    values=[_jsonable(v) for v in values], statuses=[results[i] for i in range(len(values))],
                    files=["sweep_summary.csv"])
    return summary


def _jsonable(v):
    return repr(v) if isinstance(v, float) and not np.isfinite(v) else v


def read_sweep(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- diagnose --------------------------------------------------------------------

def run_diagnose(root, start_fraction=None):
    """Recompute MAE differences and divergence from the stored cycle outputs."""
    root = Path(root)
    cfg_path = root / "config.yaml"
    if not cfg_path.exists():
        raise MissingInputError(f"{root} has no config.yaml")
    config = cfgmod.load(cfg_path)
    grid = config.build_grid()
    truth, meta = load_truth(root)
    rec_path = root / "cycle" / "records.csv"
    if not rec_path.exists():
        raise MissingInputError(f"{root} has no cycle records")
    records = read_records(rec_path)
    an = read_series(root / "cycle" / "an_mean", grid)
    fg = read_series(root / "cycle" / "fg_mean", grid)
    completed = min(len(an), len(fg), 1 + max((r.cycle for r in records), default=-1))
    frac = config.verification_start if start_fraction is None else start_fraction
    start, stop = verification_window(completed, frac)
    if stop - start < 1:
        raise NoDataError("verification window is empty")
    out = root / "diagnose"
    out.mkdir(exist_ok=True)
    w = area_weights(grid, config.weighted_rmse)
    report = {"window": [start, stop], "fields": {}}
    max_dev = 0.0
    by_field = {}
    for r in records:
        if r.cycle < completed:
            by_field.setdefault((r.variable, r.level), []).append(r)
    for v, k in grid.fields():
        idx = grid.field_indices(v, k)
        field = mae_diff(an[start:stop, idx], fg[start:stop, idx], truth[start:stop, idx])
        write_mae_diff(out / f"mae_diff_{v}_{k}.csv", grid, field.values)
        recs = by_field.get((v, k), [])
        for r in recs:
            dev = max(abs(rmse(an[r.cycle, idx], truth[r.cycle, idx], w) - r.rmse_an),
                      abs(rmse(fg[r.cycle, idx], truth[r.cycle, idx], w) - r.rmse_fg))
            max_dev = max(max_dev, dev)
        div = detect_divergence(
            [r.rmse_an for r in recs], [r.spread for r in recs],
            window=config.divergence.window, factor=config.divergence.factor,
            baseline=meta["climatological_rmse"][f"{v}:{k}"],
        )
        report["fields"][f"{v}:{k}"] = {
            "diverged": div.diverged,
            "onset": div.onset,
            "threshold": div.threshold,
            "mean_mae_diff": float(w @ field.values),
            "n_t": field.n_t,
        }
    report["diverged"] = any(f["diverged"] for f in report["fields"].values())
    report["completed_cycles"] = completed
    report["records_crosscheck_max_abs_diff"] = max_dev
    _write_json_atomic(out / "divergence.json", report)
    return report


def read_mae_diff(path, grid):
    vals = np.full((grid.n_lat, grid.n_lon), np.nan)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals[int(row["lat_idx"]), int(row["lon_idx"])] = float(row["mae_diff"])
    return vals
