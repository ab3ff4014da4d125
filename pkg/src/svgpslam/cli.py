"""Command line: ``svgpslam simulate | run | eval``.

Exit status: 0 success, 1 configuration error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import runner
from .core import EmptyDatasetError, OrderingError
from .sim import SurveyConfig
from .svgp import NumericalError
from .surveylog import LogFormatError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

SURVEY_FLAGS = {
    "bounds": dict(type=float, nargs=4, metavar=("XMIN", "YMIN", "XMAX", "YMAX")),
    "line_spacing": dict(type=float),
    "speed": dict(type=float),
    "ping_rate": dict(type=float),
    "beams": dict(type=int),
    "swath_half_angle": dict(type=float, help="radians"),
    "vehicle_depth": dict(type=float),
    "dr_noise": dict(type=float, nargs=4, metavar="VAR"),
    "dr_bias": dict(type=float, nargs=2, metavar="VEL"),
    "mbes_noise": dict(type=float),
    "duration_cap": dict(type=float),
    "cross_line": dict(action=argparse.BooleanOptionalAction, default=None),
    "max_range": dict(type=float),
}

RUN_FLAGS = {
    "mode": dict(choices=runner.MODES),
    "log": dict(help="survey log to replay (simulates when omitted)"),
    "terrain": dict(help="terrain description (JSON)"),
    "out": dict(),
    "particles": dict(type=int),
    "groups": dict(type=int),
    "minibatch": dict(type=int),
    "inducing": dict(type=int),
    "lr": dict(type=float),
    "lc_rate": dict(type=float, help="loop-closure prompt rate (Hz)"),
    "motion_noise": dict(type=float, nargs=4, metavar="VAR"),
    "meas_noise": dict(type=float),
    "seed": dict(type=int),
    "conv_window": dict(type=int),
    "conv_threshold": dict(type=float),
    "beams_per_weight": dict(type=int),
    "resample_when": dict(choices=("below", "above")),
    "pacing": dict(choices=("max", "wallclock")),
    "pacing_factor": dict(type=float),
    "iters_per_ping": dict(type=int),
    "backend": dict(choices=runner.BACKENDS),
    "cell_size": dict(type=float),
    "area": dict(type=float, nargs=4, metavar=("XMIN", "YMIN", "XMAX", "YMAX")),
    "same_streams": dict(action=argparse.BooleanOptionalAction, default=None),
    "max_pings": dict(type=int),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _flag(name):
    return "--" + name.replace("_", "-")


def _add(group, flags):
    for name, kw in flags.items():
        kw = dict(kw)
        kw.setdefault("default", None)
        group.add_argument(_flag(name), dest=name, **kw)


def build_parser():
    p = _Parser(prog="svgpslam", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", help="generate a synthetic survey log")
    sim.add_argument("--config", help="JSON file with 'survey' and 'terrain' keys")
    sim.add_argument("--terrain", default=None, help="terrain description (JSON)")
    sim.add_argument("--out", default=None, help="output directory")
    sim.add_argument("--seed", type=int, default=None)
    _add(sim.add_argument_group("survey"), SURVEY_FLAGS)

    run = sub.add_parser("run", help="run mapping-only or SLAM on a survey")
    run.add_argument("--config", help="JSON run configuration")
    _add(run.add_argument_group("run"), RUN_FLAGS)
    _add(run.add_argument_group("simulated survey (when no --log)"),
         {k: v for k, v in SURVEY_FLAGS.items()})

    ev = sub.add_parser("eval", help="recompute the report of a run directory")
    ev.add_argument("run_dir")
    return p


def _survey_overrides(args):
    out = {}
    for name in SURVEY_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            out[name] = list(v) if isinstance(v, list) else v
    return out


def _load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise runner.ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise runner.ConfigError(f"{path}: {exc}") from None


def run_config(args):
    """Config file (if any) overridden by explicit flags."""
    base = _load_json(args.config) if args.config else {}
    cfg = runner.RunConfig.from_dict(base)
    for name in RUN_FLAGS:
        v = getattr(args, name)
        if v is not None:
            setattr(cfg, name, tuple(v) if isinstance(v, list) else v)
    survey = dict(cfg.survey or {})
    survey.update(_survey_overrides(args))
    cfg.survey = survey
    return cfg.validate()


def cmd_simulate(args):
    base = _load_json(args.config) if args.config else {}
    unknown = set(base) - {"survey", "terrain", "out", "seed", "log"}
    if unknown:
        raise runner.ConfigError(f"unknown config keys: {sorted(unknown)}")
    survey = runner.default_survey().to_dict()
    survey.update(base.get("survey", {}))
    survey.update(_survey_overrides(args))
    seed = args.seed if args.seed is not None else base.get("seed")
    if seed is not None:
        survey["seed"] = seed
    try:
        survey = SurveyConfig.from_dict(survey)
    except (TypeError, ValueError) as exc:
        raise runner.ConfigError(f"survey: {exc}") from None
    terrain = runner.load_terrain(args.terrain or base.get("terrain"))
    out = args.out or base.get("out") or "survey"
    data = runner.simulate(terrain, survey, out)
    print(f"wrote {out}/survey.csv: {len(data.pings)} pings, {data.n_beams} beams")
    return EXIT_OK


def cmd_run(args):
    cfg = run_config(args)

    def progress(i, n, pset):
        if i % 500 == 0 or i == n:
            it = np.mean([p.map.iterations for p in pset])
            logging.getLogger("svgpslam").info("ping %d/%d, %.0f iterations/particle", i, n, it)

    res = runner.run(cfg, progress=progress)
    rep = res.report
    msg = (f"{res.pings} pings, map RMSE {rep.mean_map_rmse:.3f} m, "
           f"{float(np.mean(rep.iterations)):.0f} iterations/particle")
    if rep.rbpf_error is not None:
        msg += (f", trajectory RMSE {rep.rbpf_error.rmse:.2f} m "
                f"(DR {rep.dr_error.rmse:.2f} m)")
    if res.interrupted:
        msg += " [interrupted, partial dump]"
    print(f"{res.out}: {msg}")
    return EXIT_OK


def cmd_eval(args):
    rep = runner.evaluate_run(args.run_dir)
    print(f"{args.run_dir}: map RMSE {rep.mean_map_rmse:.3f} m over {len(rep.map_rmse)} map(s)")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "eval": cmd_eval}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except runner.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (runner.DataError, LogFormatError, OrderingError, EmptyDatasetError,
            OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
