"""End-to-end pipelines: simulate a survey, run the filter, evaluate a run.

A run directory holds everything needed to recompute its report::

    config.json                 resolved configuration
    survey.csv, terrain.json    simulated input (when not replaying a log)
    dr.csv, truth.csv           navigation streams (t, x, y, z, yaw)
    particles/trajectory_NNN.csv
    estimate.csv                average of the particle histories
    estimate_online.csv         particle mean at every ping
    weights.csv                 t, w_1..w_J after every weighting pass
    resamples.csv               t, ESS, cloud means, offspring counts
    maps/model_NNN.npz          SVGP checkpoints
    maps/mean_NNN.asc, maps/variance_NNN.asc, maps/inducing_NNN.csv
    state.csv                   pings processed, interrupted flag
    timing.csv                  wall-clock throughput (not reproducible)

plus the report files written by :func:`evaluate_run`.
"""

from __future__ import annotations

import json
import logging
import math
import os
import signal
import threading
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import svgp
from .core import BeamLog, ControlInput, Pose, transform_beams, wrap_angle
from .evaluation import (RunReport, consistency_error, export_map_grid, hold_states,
                         read_table, trajectory_error, write_table)
from .filter import (Trajectory, effective_sample_size, estimate_trajectory,
                     make_particle_set, predict, resample, should_resample,
                     weigh_particles)
from .scheduler import BACKENDS, TrainerPool
from .sim import SurveyConfig, SurveyData, TerrainField, run_mission
from .surveylog import ingest_log, write_log

log = logging.getLogger(__name__)

MODES = ("map-only", "slam")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Missing or unusable input data or run artifacts."""


def default_terrain():
    """Sloped seabed with three bumps over a 200 x 200 m survey area."""
    return TerrainField(bounds=(-60.0, -60.0, 260.0, 260.0), offset=-40.0,
                        gradient=(0.02, 0.01),
                        bumps=[(60.0, 70.0, 8.0, 25.0), (140.0, 130.0, -6.0, 30.0),
                               (150.0, 50.0, 7.0, 20.0)])


def default_survey():
    """Four lawnmower lines at 1 m/s, 4 Hz, 128 beams: about 490k beams."""
    return SurveyConfig(bounds=(0.0, 0.0, 200.0, 200.0), line_spacing=50.0, speed=1.0,
                        ping_rate=4.0, beams=128, mbes_noise=0.1)


@dataclass
class RunConfig:
    """Every knob of a run.  Field names map to kebab-case CLI flags."""

    mode: str = "map-only"
    log: str | None = None
    terrain: str | None = None
    survey: dict = field(default_factory=dict)
    out: str = "run"
    particles: int = 1
    groups: int = 1
    minibatch: int = 300
    inducing: int = 256
    lr: float = 0.1
    lc_rate: float = 0.1
    motion_noise: tuple = (0.0, 0.0, 0.0, 0.0)
    meas_noise: float = 1.0
    seed: int = 0
    conv_window: int = svgp.DEFAULT_WINDOW
    conv_threshold: float = svgp.DEFAULT_THRESHOLD
    beams_per_weight: int = 32
    resample_when: str = "below"
    pacing: str = "max"
    pacing_factor: float = 1.0
    iters_per_ping: int = 13
    backend: str = "inline"
    cell_size: float = 1.0
    area: tuple | None = None
    same_streams: bool = False
    max_pings: int | None = None

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("particles", "groups", "minibatch", "inducing", "conv_window",
                     "beams_per_weight"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.particles % self.groups:
            raise ConfigError(f"groups ({self.groups}) must divide particles ({self.particles})")
        for name in ("lr", "lc_rate", "meas_noise", "conv_threshold", "pacing_factor",
                     "cell_size"):
            if not float(getattr(self, name)) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.iters_per_ping < 0:
            raise ConfigError("iters_per_ping must be non-negative")
        if len(self.motion_noise) != 4 or min(self.motion_noise) < 0:
            raise ConfigError("motion_noise needs four non-negative variances")
        if self.resample_when not in ("below", "above"):
            raise ConfigError("resample_when must be 'below' or 'above'")
        if self.pacing not in ("max", "wallclock"):
            raise ConfigError("pacing must be 'max' or 'wallclock'")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}")
        if self.area is not None:
            a = self.area
            if len(a) != 4 or not (a[2] > a[0] and a[3] > a[1]):
                raise ConfigError(f"area must be (xmin, ymin, xmax, ymax), got {a}")
        try:
            survey_config(self)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"survey: {exc}") from None
        return self

    def to_dict(self):
        d = asdict(self)
        d["motion_noise"] = list(self.motion_noise)
        d["area"] = None if self.area is None else list(self.area)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("motion_noise") is not None:
            d["motion_noise"] = tuple(float(v) for v in d["motion_noise"])
        if d.get("area") is not None:
            d["area"] = tuple(float(v) for v in d["area"])
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def survey_config(cfg):
    base = default_survey().to_dict()
    base.update(cfg.survey or {})
    return SurveyConfig.from_dict(base)


def load_terrain(path):
    if path is None:
        return default_terrain()
    try:
        return TerrainField.load(path)
    except FileNotFoundError:
        raise DataError(f"terrain file not found: {path}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"terrain file {path}: {exc}") from None


# -- simulate --------------------------------------------------------------

def simulate(terrain, survey, out, write_config=True):
    """Run a mission and write ``survey.csv``, ``terrain.json`` and
    ``config.json`` into ``out``.  Returns the survey data."""
    os.makedirs(out, exist_ok=True)
    data = run_mission(terrain, survey, os.path.join(out, "survey.csv"))
    terrain.save(os.path.join(out, "terrain.json"))
    if not write_config:
        return data
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"survey": survey.to_dict(), "terrain": "terrain.json",
                   "log": "survey.csv"}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return data


# -- helpers ---------------------------------------------------------------

def control_from_dr(s0, s1, t1, dt):
    """Body-frame velocities that carry DR state ``s0`` to ``s1`` in ``dt``."""
    dx, dy = s1[0] - s0[0], s1[1] - s0[1]
    c, s = math.cos(s0[3]), math.sin(s0[3])
    return ControlInput(t1, surge=(c * dx + s * dy) / dt,
                        yaw_rate=float(wrap_angle(s1[3] - s0[3])) / dt,
                        sway=(-s * dx + c * dy) / dt, z=float(s1[2]))


def write_trajectory(path, traj):
    write_table(path, ["t", "x", "y", "z", "yaw"],
                [(t, *s) for t, s in zip(traj.times, traj.states)])


def read_trajectory(path):
    _, rows = _read(path)
    arr = np.array(rows, dtype=float).reshape(-1, 5)
    return Trajectory(arr[:, 0], arr[:, 1:])


def _read(path):
    if not os.path.exists(path):
        raise DataError(f"missing artifact: {path}")
    return read_table(path)


def reference_soundings(data, terrain=None):
    """Map-frame reference soundings for the consistency metric.

    With a known terrain and ground truth the soundings are the true beam
    footprints with noiseless terrain depth; otherwise the raw beams
    projected through dead reckoning.
    """
    if not data.pings:
        raise DataError("survey holds no pings")
    beams = np.vstack([p.beams for p in data.pings])
    counts = [len(p) for p in data.pings]
    nav = data.truth if (terrain is not None and data.truth is not None) else data.dr
    states = np.repeat(nav.states, counts, axis=0)
    pts = transform_beams(states, beams)
    if nav is data.truth:
        pts[:, 2] = terrain.height(pts[:, :2])
    return pts


@dataclass
class RunResult:
    out: str
    pings: int
    interrupted: bool
    report: RunReport
    seconds: float


class _StopFlag:
    """SIGINT/SIGTERM set a flag checked at ping boundaries."""

    def __init__(self):
        self.set = False
        self._old = {}

    def __enter__(self):
        if threading.current_thread() is threading.main_thread():
            for sig in (signal.SIGINT, signal.SIGTERM):
                self._old[sig] = signal.signal(sig, self._handle)
        return self

    def _handle(self, signum, frame):
        log.warning("signal %d received; finishing the current ping", signum)
        self.set = True

    def __exit__(self, *exc):
        for sig, h in self._old.items():
            signal.signal(sig, h)


# -- run -------------------------------------------------------------------

def prepare_input(cfg):
    """Load the survey log or simulate one into the run directory."""
    if cfg.log is not None:
        try:
            data = ingest_log(cfg.log)
        except FileNotFoundError:
            raise DataError(f"survey log not found: {cfg.log}") from None
        terrain = load_terrain(cfg.terrain) if cfg.terrain is not None else None
        return data, terrain, survey_config(cfg).bounds if cfg.survey else None
    terrain = load_terrain(cfg.terrain)
    survey = survey_config(cfg)
    data = simulate(terrain, survey, cfg.out, write_config=False)
    return data, terrain, survey.bounds


def run(cfg, progress=None):
    """Execute a mapping-only or SLAM run and write its artifacts and report."""
    cfg.validate()
    t_start = time.perf_counter()
    os.makedirs(cfg.out, exist_ok=True)
    data, terrain, survey_bounds = prepare_input(cfg)
    if not data.pings:
        raise DataError("survey holds no pings")
    resolved = RunConfig.from_dict(cfg.to_dict())
    if cfg.log is None:
        resolved.log = "survey.csv"
        resolved.terrain = "terrain.json"
        resolved.survey = survey_config(cfg).to_dict()
    else:
        resolved.log = os.path.abspath(cfg.log)
        if cfg.terrain is not None:
            resolved.terrain = os.path.abspath(cfg.terrain)
    area = cfg.area or survey_bounds
    if area is None:
        from .evaluation import points_bounds
        area = points_bounds(reference_soundings(data), cfg.cell_size)
    resolved.area = tuple(float(a) for a in area)
    resolved.out = os.path.abspath(cfg.out)
    resolved.save(os.path.join(cfg.out, "config.json"))

    root = np.random.SeedSequence(cfg.seed)
    z_ss, resample_ss, model_ss = root.spawn(3)
    n_pings = len(data.pings) if cfg.max_pings is None else min(cfg.max_pings, len(data.pings))
    pose0 = Pose.from_state(data.dr.times[0], data.dr.states[0])
    pset = make_particle_set(cfg.particles, pose0, motion_noise=cfg.motion_noise,
                             meas_noise=cfg.meas_noise, groups=cfg.groups,
                             seed=cfg.seed, same_streams=cfg.same_streams,
                             resample_when=cfg.resample_when,
                             beams_per_weight=cfg.beams_per_weight)
    resample_rng = np.random.default_rng(resample_ss)
    beam_log = BeamLog()
    conv = dict(window=cfg.conv_window, threshold=cfg.conv_threshold)
    period = 1.0 / cfg.lc_rate
    last_prompt = data.pings[0].t
    weights_rows, resample_rows, online = [], [], []
    processed = 0
    train_seconds = 0.0

    with TrainerPool(cfg.groups, cfg.backend) as pool, _StopFlag() as stop:
        wall0 = time.monotonic()
        for i in range(n_pings):
            ping = data.pings[i]
            if i > 0:
                dt = ping.t - data.pings[i - 1].t
                if dt > 0:
                    predict(pset, control_from_dr(data.dr.states[i - 1], data.dr.states[i],
                                                  ping.t, dt), dt)
            beam_log.append_ping(ping)
            if i == 0:
                _init_maps(pset, ping, area, cfg, z_ss, model_ss)
            if cfg.mode == "slam" and ping.t - last_prompt >= period - 1e-9:
                last_prompt = ping.t
                if pset.all_converged():
                    _prompt(pset, ping, pool, resample_rng, weights_rows, resample_rows)
            t0 = time.perf_counter()
            if cfg.pacing == "wallclock" and i + 1 < n_pings:
                due = wall0 + (data.pings[i + 1].t - data.pings[0].t) / cfg.pacing_factor
                pool.train(pset, beam_log, 1, cfg.minibatch, cfg.lr, **conv)
                while time.monotonic() < due and not stop.set:
                    pool.train(pset, beam_log, 1, cfg.minibatch, cfg.lr, **conv)
            else:
                pool.train(pset, beam_log, cfg.iters_per_ping, cfg.minibatch, cfg.lr, **conv)
            train_seconds += time.perf_counter() - t0
            online.append((ping.t, *_mean_state(pset.states())))
            processed = i + 1
            if progress is not None:
                progress(processed, n_pings, pset)
            if stop.set:
                break
        interrupted = processed < n_pings

    _dump(cfg.out, data, pset, processed, weights_rows, resample_rows, online,
          interrupted, area, cfg.cell_size)
    stats = [(g, s.iterations, s.seconds) for g, s in enumerate(pool.stats)]
    total = sum(p.map.iterations for p in pset)
    write_table(os.path.join(cfg.out, "timing.csv"),
                ["group", "iterations", "seconds"], stats + [("all", total, train_seconds)])
    report = evaluate_run(cfg.out)
    return RunResult(cfg.out, processed, interrupted, report, time.perf_counter() - t_start)


def _init_maps(pset, ping, area, cfg, z_ss, model_ss):
    pts = transform_beams(pset[0].state, ping.beams)
    offset = float(np.mean(pts[:, 2]))
    kernel = svgp.default_kernel(area, pts[:, 2])
    Z = svgp.init_inducing_uniform(area, cfg.inducing, np.random.default_rng(z_ss))
    base = svgp.new_model(Z, kernel, depth_offset=offset)
    base.ema_window = cfg.conv_window
    seeds = [model_ss] * len(pset) if cfg.same_streams else model_ss.spawn(len(pset))
    for p, ss in zip(pset, seeds):
        m = base.copy()
        m.rng = np.random.default_rng(ss)
        p.map = m


def _mean_state(states):
    m = states.mean(axis=0)
    m[3] = math.atan2(np.sin(states[:, 3]).mean(), np.cos(states[:, 3]).mean())
    return m


def _prompt(pset, ping, pool, rng, weights_rows, resample_rows):
    loglik = pool.loglik(pset, ping)
    weigh_particles(pset, ping, loglik)
    weights_rows.append((ping.t, *pset.weights))
    if should_resample(pset):
        ess = effective_sample_size(pset)
        before = pset.states()[:, :2].mean(axis=0)
        anc = resample(pset, rng)
        after = pset.states()[:, :2].mean(axis=0)
        counts = np.bincount(anc, minlength=len(pset))
        resample_rows.append((ping.t, ess, *before, *after, *counts))
        log.info("t=%.1f resampled (ESS %.2f)", ping.t, ess)


def _dump(out, data, pset, processed, weights_rows, resample_rows, online, interrupted,
          area, cell_size):
    p = lambda *a: os.path.join(out, *a)  # noqa: E731
    os.makedirs(p("particles"), exist_ok=True)
    os.makedirs(p("maps"), exist_ok=True)
    J = len(pset)
    write_trajectory(p("dr.csv"), Trajectory(data.dr.times[:processed],
                                             data.dr.states[:processed]))
    if data.truth is not None:
        write_trajectory(p("truth.csv"), Trajectory(data.truth.times[:processed],
                                                    data.truth.states[:processed]))
    for j, part in enumerate(pset):
        t, s = part.history.materialize()
        write_trajectory(p("particles", f"trajectory_{j:03d}.csv"), Trajectory(t, s))
    write_trajectory(p("estimate.csv"), estimate_trajectory(pset))
    on = np.array(online, dtype=float).reshape(-1, 5)
    write_trajectory(p("estimate_online.csv"), Trajectory(on[:, 0], on[:, 1:]))
    write_table(p("weights.csv"), ["t"] + [f"w_{j + 1}" for j in range(J)], weights_rows)
    write_table(p("resamples.csv"),
                ["t", "ess", "before_x", "before_y", "after_x", "after_y"]
                + [f"n_{j + 1}" for j in range(J)], resample_rows)
    write_table(p("state.csv"), ["key", "value"],
                [("pings_processed", processed), ("pings_total", len(data.pings)),
                 ("interrupted", interrupted)])
    for j, part in enumerate(pset):
        svgp.save_checkpoint(part.map, p("maps", f"model_{j:03d}.npz"))
        mean, var, Z = export_map_grid(part.map, area, cell_size)
        mean.write(p("maps", f"mean_{j:03d}.asc"))
        var.write(p("maps", f"variance_{j:03d}.asc"))
        write_table(p("maps", f"inducing_{j:03d}.csv"), ["x", "y"], Z)


# -- evaluate --------------------------------------------------------------

def _resolve(base, path):
    if path is None:
        return None
    return path if os.path.isabs(path) else os.path.join(base, path)


def evaluate_run(out):
    """Recompute the run report from the artifacts in ``out`` and write it."""
    cfg_path = os.path.join(out, "config.json")
    if not os.path.exists(cfg_path):
        raise DataError(f"missing artifact: {cfg_path}")
    cfg = RunConfig.load(cfg_path)
    log_path = _resolve(out, cfg.log)
    if log_path is None or not os.path.exists(log_path):
        raise DataError(f"missing artifact: survey log {log_path}")
    data = ingest_log(log_path)
    terrain = load_terrain(_resolve(out, cfg.terrain)) if cfg.terrain else None
    _, state = _read(os.path.join(out, "state.csv"))
    processed = int(dict(state)["pings_processed"])
    data = SurveyData(data.pings[:processed],
                      Trajectory(data.dr.times[:processed], data.dr.states[:processed]),
                      None if data.truth is None else
                      Trajectory(data.truth.times[:processed], data.truth.states[:processed]))
    ref = reference_soundings(data, terrain)

    models = []
    for j in range(cfg.particles):
        path = os.path.join(out, "maps", f"model_{j:03d}.npz")
        if not os.path.exists(path):
            raise DataError(f"missing artifact: {path}")
        models.append(svgp.load_checkpoint(path))
    grids, rmses = [], []
    for m in models:
        g, r = consistency_error(ref, m, cfg.cell_size, cfg.area)
        grids.append(g)
        rmses.append(r)

    _, rs_rows = _read(os.path.join(out, "resamples.csv"))
    dr_err = rb_err = None
    cloud = []
    if data.truth is not None:
        dr_err = trajectory_error(read_trajectory(os.path.join(out, "dr.csv")), data.truth)
        rb_err = trajectory_error(read_trajectory(os.path.join(out, "estimate.csv")),
                                  data.truth)
        for row in rs_rows:
            t = row[0]
            gt = hold_states(data.truth, np.array([t]))[0, :2]
            cloud.append((t, float(np.hypot(*(np.array(row[2:4]) - gt))),
                          float(np.hypot(*(np.array(row[4:6]) - gt)))))
    report = RunReport(map_rmse=rmses, error_grids=grids,
                       iterations=np.array([m.iterations for m in models]),
                       elbo_traces=[m.elbo_trace for m in models],
                       resample_events=rs_rows, dr_error=dr_err, rbpf_error=rb_err,
                       cloud_errors=cloud, converged=[m.converged for m in models])
    report.write(out)
    return report
