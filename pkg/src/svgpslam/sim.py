"""Synthetic seabed, lawnmower missions, multibeam and dead-reckoning noise."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Ping, Pose, wrap_angle
from .filter import Trajectory

log = logging.getLogger(__name__)

RAY_TOL = 1e-3
RAY_MAX_ITER = 64


@dataclass
class TerrainField:
    """Plane + Gaussian bumps + seeded smooth sinusoidal octaves.

    ``bumps`` rows are ``(cx, cy, amplitude, width)``; ``octaves`` rows are
    ``(amplitude, wavelength)``, each realised as a few plane waves with
    seeded directions and phases.  Heights are metres, ``z`` up.
    """

    bounds: tuple
    offset: float = -40.0
    gradient: tuple = (0.0, 0.0)
    bumps: list = field(default_factory=list)
    octaves: list = field(default_factory=list)
    seed: int = 0
    waves_per_octave: int = 3

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.bounds
        if not (xmax > xmin and ymax > ymin):
            raise ValueError(f"degenerate terrain bounds {self.bounds}")
        self.bounds = tuple(float(b) for b in self.bounds)
        self.gradient = tuple(float(g) for g in self.gradient)
        self._bumps = np.asarray(self.bumps, dtype=float).reshape(-1, 4)
        rng = np.random.default_rng(self.seed)
        waves = []
        for amp, wavelength in self.octaves:
            for _ in range(self.waves_per_octave):
                ang = rng.uniform(0, 2 * np.pi)
                k = 2 * np.pi / wavelength
                waves.append((amp / math.sqrt(self.waves_per_octave),
                              k * math.cos(ang), k * math.sin(ang), rng.uniform(0, 2 * np.pi)))
        self._waves = np.asarray(waves, dtype=float).reshape(-1, 4)
        self._warned = False

    def to_dict(self):
        d = asdict(self)
        d["bumps"] = [list(map(float, b)) for b in self._bumps]
        d["octaves"] = [list(map(float, o)) for o in self.octaves]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def height(self, xy):
        """Seabed height at ``(..., 2)`` points."""
        xy = np.asarray(xy, dtype=float)
        x, y = xy[..., 0], xy[..., 1]
        xmin, ymin, xmax, ymax = self.bounds
        if np.any((x < xmin) | (x > xmax) | (y < ymin) | (y > ymax)):
            if not self._warned:
                log.warning("terrain queried outside its bounds; clamping")
                self._warned = True
            x = np.clip(x, xmin, xmax)
            y = np.clip(y, ymin, ymax)
        h = self.offset + self.gradient[0] * x + self.gradient[1] * y
        for cx, cy, amp, width in self._bumps:
            h = h + amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * width * width))
        for amp, kx, ky, phase in self._waves:
            h = h + amp * np.sin(kx * x + ky * y + phase)
        return h


def terrain_height(field, x):
    return float(field.height(np.asarray(x, dtype=float)))


@dataclass
class SurveyConfig:
    """Lawnmower survey description.

    Lines run along x, spaced ``line_spacing`` apart in y, inset half a
    spacing from the area edges.  ``dr_noise`` is the per-second
    covariance diagonal over ``[x, y, z, yaw]`` of the dead-reckoning
    increments; ``dr_bias`` a map-frame velocity (m/s) the navigation does
    not sense, so it accumulates as drift.  ``cross_line`` appends a final
    line across the others through the middle of the area, revisiting
    every earlier line.
    """

    bounds: tuple = (0.0, 0.0, 200.0, 200.0)
    line_spacing: float = 50.0
    speed: float = 1.0
    ping_rate: float = 1.0
    beams: int = 64
    swath_half_angle: float = math.radians(60.0)
    vehicle_depth: float = -15.0
    dr_noise: tuple = (0.0, 0.0, 0.0, 0.0)
    dr_bias: tuple = (0.0, 0.0)
    mbes_noise: float = 0.0
    seed: int = 0
    duration_cap: float = float("inf")
    cross_line: bool = False
    max_range: float = 500.0

    def __post_init__(self):
        self.bounds = tuple(float(b) for b in self.bounds)
        self.dr_noise = tuple(float(v) for v in self.dr_noise)
        self.dr_bias = tuple(float(v) for v in self.dr_bias)
        if not (self.speed > 0 and self.ping_rate > 0 and self.line_spacing > 0):
            raise ValueError("speed, ping rate and line spacing must be positive")
        if not 0 <= self.swath_half_angle < math.pi / 2:
            raise ValueError("swath half-angle must be in [0, pi/2)")
        if self.beams < 1:
            raise ValueError("need at least one beam per ping")
        if min(self.dr_noise) < 0 or self.mbes_noise < 0:
            raise ValueError("noise levels must be non-negative")

    def to_dict(self):
        d = asdict(self)
        if math.isinf(d["duration_cap"]):
            d["duration_cap"] = None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("duration_cap") is None:
            d.pop("duration_cap", None)
        return cls(**d)


def waypoints(cfg):
    xmin, ymin, xmax, ymax = cfg.bounds
    ys = np.arange(ymin + cfg.line_spacing / 2.0, ymax, cfg.line_spacing)
    pts = []
    for i, y in enumerate(ys):
        xs = (xmin, xmax) if i % 2 == 0 else (xmax, xmin)
        pts += [(xs[0], y), (xs[1], y)]
    if cfg.cross_line:
        xm = 0.5 * (xmin + xmax)
        last_y = pts[-1][1]
        far_y = ymin if last_y > 0.5 * (ymin + ymax) else ymax
        pts += [(xm, last_y), (xm, far_y)]
    return np.asarray(pts)


def plan_path(cfg):
    """True poses sampled at the ping rate along the waypoint polyline."""
    wp = waypoints(cfg)
    seg = np.diff(wp, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    keep = seg_len > 0
    seg, seg_len, starts = seg[keep], seg_len[keep], wp[:-1][keep]
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    dt = 1.0 / cfg.ping_rate
    duration = min(cum[-1] / cfg.speed, cfg.duration_cap)
    t = np.arange(0.0, duration + 1e-9, dt)
    s = np.minimum(t * cfg.speed, cum[-1])
    k = np.minimum(np.searchsorted(cum, s, side="right") - 1, len(seg) - 1)
    frac = (s - cum[k]) / seg_len[k]
    xy = starts[k] + frac[:, None] * seg[k]
    yaw = np.arctan2(seg[k, 1], seg[k, 0])
    states = np.column_stack([xy, np.full(len(t), cfg.vehicle_depth), yaw])
    return Trajectory(t, states)


def dead_reckoning(truth, cfg, rng):
    """Integrate body-frame increments of ``truth`` with noise and bias."""
    T = truth.states
    if not any(cfg.dr_noise) and not any(cfg.dr_bias):
        return Trajectory(truth.times.copy(), T.copy())
    n = len(T)
    dr = np.empty_like(T)
    dr[0] = T[0]
    std = np.sqrt(np.asarray(cfg.dr_noise))
    bias = np.asarray(cfg.dr_bias)
    for i in range(1, n):
        dt = truth.times[i] - truth.times[i - 1]
        c, s = math.cos(T[i - 1, 3]), math.sin(T[i - 1, 3])
        dx, dy = T[i, 0] - T[i - 1, 0], T[i, 1] - T[i - 1, 1]
        fwd, lat = c * dx + s * dy, -s * dx + c * dy
        noise = rng.standard_normal(4) * std * math.sqrt(dt)
        dyaw = wrap_angle(T[i, 3] - T[i - 1, 3]) + noise[3]
        cd, sd = math.cos(dr[i - 1, 3]), math.sin(dr[i - 1, 3])
        dr[i, 0] = dr[i - 1, 0] + cd * fwd - sd * lat + noise[0] - bias[0] * dt
        dr[i, 1] = dr[i - 1, 1] + sd * fwd + cd * lat + noise[1] - bias[1] * dt
        dr[i, 2] = dr[i - 1, 2] + (T[i, 2] - T[i - 1, 2]) + noise[2]
        dr[i, 3] = wrap_angle(dr[i - 1, 3] + dyaw)
    return Trajectory(truth.times.copy(), dr)


def beam_angles(cfg):
    """Across-track beam angles, port (positive) to starboard."""
    if cfg.beams == 1:
        return np.zeros(1)
    return np.linspace(cfg.swath_half_angle, -cfg.swath_half_angle, cfg.beams)


def cast_rays(field, pose, angles, max_range=500.0):
    """Intersect fan rays with the seabed.

    Returns ``(ranges, hit)``: along-ray distances and a flag for rays that
    met the seabed within ``max_range``.  A fixed-point pass (exact in one
    step on a flat floor) is tried first; rays it leaves unresolved are
    bisected.
    """
    px, py, pz = pose.position
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    down, side = np.cos(angles), np.sin(angles)
    # body direction (0, sin a, -cos a) rotated into the map frame
    ux, uy = -s * side, c * side

    def gap(r, idx):
        pts = np.stack([px + r * ux[idx], py + r * uy[idx]], axis=-1)
        return pz - r * down[idx] - field.height(pts)

    every = np.arange(len(angles))
    with np.errstate(all="ignore"):
        r = np.maximum((pz - field.height(np.array([px, py]))) / down, 0.0)
        for _ in range(RAY_MAX_ITER // 2):
            g = gap(r, every)
            if np.all(np.abs(g) <= 1e-6):
                break
            r = np.clip(r + g / down, 0.0, max_range)
        hit = (np.abs(gap(r, every)) <= 1e-6) & (r <= max_range)
    idx = np.flatnonzero(~hit)
    if len(idx):
        lo = np.zeros(len(idx))
        hi = np.full(len(idx), float(max_range))
        ok = gap(hi, idx) < 0
        for _ in range(RAY_MAX_ITER):
            mid = 0.5 * (lo + hi)
            above = gap(mid, idx) > 0
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
        rr = 0.5 * (lo + hi)
        r[idx] = rr
        hit[idx] = ok & (np.abs(gap(rr, idx)) <= RAY_TOL)
    return r, hit


def simulate_ping(field, true_pose, cfg, rng):
    """One multibeam ping from ``true_pose``; beams in the vehicle frame.

    Rays that find no seabed within ``cfg.max_range`` are dropped.
    """
    angles = beam_angles(cfg)
    r, hit = cast_rays(field, true_pose, angles, cfg.max_range)
    if not hit.any():
        return None
    a, r = angles[hit], r[hit]
    beams = np.column_stack([np.zeros(len(a)), r * np.sin(a), -r * np.cos(a)])
    if cfg.mbes_noise > 0:
        beams[:, 2] += rng.normal(0.0, cfg.mbes_noise, size=len(a))
    return Ping(true_pose.t, beams)


@dataclass
class SurveyData:
    """Pings with the dead-reckoning (and optionally true) pose at each."""

    pings: list
    dr: Trajectory
    truth: Trajectory | None = None

    def __len__(self):
        return len(self.pings)

    @property
    def n_beams(self):
        return sum(len(p) for p in self.pings)


def run_mission(field, cfg, path=None, *, with_pings=True):
    """Fly the lawnmower over ``field`` and record pings, DR and truth.

    Writes the survey log to ``path`` when given.  Pings whose every beam
    missed the seabed are left out (with their poses).
    """
    dr_rng, mbes_rng = (np.random.default_rng(s) for s in
                        np.random.SeedSequence(cfg.seed).spawn(2))
    truth = plan_path(cfg)
    dr = dead_reckoning(truth, cfg, dr_rng)
    if not with_pings:
        return SurveyData([], dr, truth)
    pings, keep = [], []
    for i, (t, s) in enumerate(zip(truth.times, truth.states)):
        ping = simulate_ping(field, Pose.from_state(t, s), cfg, mbes_rng)
        if ping is not None:
            pings.append(ping)
            keep.append(i)
    keep = np.asarray(keep, dtype=int)
    data = SurveyData(pings, Trajectory(dr.times[keep], dr.states[keep]),
                      Trajectory(truth.times[keep], truth.states[keep]))
    if path is not None:
        from .surveylog import write_log
        write_log(data, path)
    return data
