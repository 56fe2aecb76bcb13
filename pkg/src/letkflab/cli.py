"""Command-line entry point: ``letkflab <stage> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 2 configuration error, 3 model/analysis blow-up,
4 filter divergence (only with ``--fail-on-divergence``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import config as cfgmod
from . import experiment
from .errors import (
    AnalysisBlewUpError,
    ConfigError,
    LetkfLabError,
    MissingInputError,
    ModelBlewUpError,
    NoDataError,
)

EXIT_OK, EXIT_CONFIG, EXIT_BLOWUP, EXIT_DIVERGED = 0, 2, 3, 4


def _load_config(args):
    if args.config:
        config = cfgmod.load(args.config)
    else:
        config = cfgmod.preset(args.preset)
    return cfgmod.apply_overrides(config, args.set)


def _add_config_args(p):
    p.add_argument("--config", "-c", help="YAML experiment config")
    p.add_argument("--preset", default="lorenz96", choices=sorted(cfgmod.PRESETS),
                   help="built-in config used when --config is absent (default: lorenz96)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. letkf.L_h=800 (repeatable)")


def build_parser():
    parser = argparse.ArgumentParser(prog="letkflab", description="LETKF twin-experiment harness")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("nature", help="integrate and store the truth trajectory")
    _add_config_args(p)
    p = sub.add_parser("make-obs", help="synthesise observations from the truth")
    _add_config_args(p)
    p = sub.add_parser("cycle", help="run the forecast/analysis cycle")
    _add_config_args(p)
    p.add_argument("--fail-on-divergence", action="store_true")
    p = sub.add_parser("run", help="nature, make-obs, cycle and diagnose in one go")
    _add_config_args(p)
    p.add_argument("--fail-on-divergence", action="store_true")
    p = sub.add_parser("sweep", help="repeat the pipeline over values of one parameter")
    _add_config_args(p)
    p.add_argument("--param", required=True, help="dotted config key, e.g. letkf.L_h")
    p.add_argument("--values", required=True, help="comma-separated values; 'inf' allowed")
    p.add_argument("--jobs", type=int, default=1)
    p = sub.add_parser("diagnose", help="MAE differences and divergence report")
    p.add_argument("experiment_dir")
    p.add_argument("--start", type=float, default=None,
                   help="verification window start as a fraction of cycles (default from config)")
    p.add_argument("--fail-on-divergence", action="store_true")
    p = sub.add_parser("show-config", help="print the resolved config as YAML")
    _add_config_args(p)
    return parser


def _diverged(report, fail):
    if report["diverged"]:
        bad = [k for k, f in report["fields"].items() if f["diverged"]]
        print(f"filter divergence in {len(bad)} field(s): {', '.join(bad[:5])}", file=sys.stderr)
        if fail:
            return EXIT_DIVERGED
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "diagnose":
            report = experiment.run_diagnose(args.experiment_dir, args.start)
            print(json.dumps({k: report[k] for k in ("window", "diverged", "completed_cycles")}))
            return _diverged(report, args.fail_on_divergence)
        config = _load_config(args)
        if args.command == "show-config":
            print(cfgmod.dumps(config), end="")
        elif args.command == "nature":
            files = experiment.run_nature(config)
            print(f"wrote {len(files)} truth snapshots to {config.output_path() / 'nature'}")
        elif args.command == "make-obs":
            print(experiment.run_make_obs(config))
        elif args.command in ("cycle", "run"):
            if args.command == "run":
                experiment.run_nature(config)
                experiment.run_make_obs(config)
            outcome = experiment.run_cycle(config)
            report = experiment.run_diagnose(config.output_path())
            print(f"{outcome.completed} cycles complete; records in {config.output_path() / 'cycle'}")
            return _diverged(report, args.fail_on_divergence)
        elif args.command == "sweep":
            values = [cfgmod.parse_value(v) for v in args.values.split(",")]
            print(experiment.run_sweep(config, args.param, values, jobs=args.jobs))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ModelBlewUpError, AnalysisBlewUpError) as exc:
        print(f"blow-up: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    except (MissingInputError, NoDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except LetkfLabError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
