"""Rao-Blackwellised particle filter whose particles each carry an SVGP map.

A particle is a pose hypothesis, its trajectory history and its own
:class:`~svgpslam.svgp.SvgpModel`.  Maps are trained from minibatches
built by re-projecting randomly drawn log beams through the particle's
own past poses; loop-closure prompts weight the particles by how well
their maps predict the latest ping and resample systematically when the
weights degenerate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import svgp
from .core import EmptyDatasetError, Pose, transform_beams, wrap_angle
from .lineage import SegmentIndex, TrajectoryHistory, states_at

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class Particle:
    id: int
    history: TrajectoryHistory
    map: svgp.SvgpModel | None
    weight: float
    motion_rng: np.random.Generator
    batch_rng: np.random.Generator

    @property
    def state(self):
        return self.history.latest[1]

    @property
    def pose(self):
        t, s = self.history.latest
        return Pose.from_state(t, s)


@dataclass
class ParticleSet:
    """``J`` particles split into ``B`` trainer groups of ``J / B`` each.

    ``motion_noise`` is the diagonal of the per-second motion covariance
    over ``[x, y, z, yaw]``; ``meas_noise`` the per-beam depth variance
    added to the map's predictive variance when weighting.
    """

    particles: list
    motion_noise: np.ndarray
    meas_noise: float
    groups: int = 1
    index: SegmentIndex = field(default_factory=SegmentIndex)
    log_weights: np.ndarray = None
    resample_when: str = "below"
    beams_per_weight: int = 32

    def __post_init__(self):
        J = len(self.particles)
        if J < 1:
            raise ValueError("need at least one particle")
        if self.groups < 1 or J % self.groups:
            raise ValueError(f"groups ({self.groups}) must divide particles ({J})")
        if self.resample_when not in ("below", "above"):
            raise ValueError("resample_when must be 'below' or 'above'")
        self.motion_noise = np.asarray(self.motion_noise, dtype=float).reshape(4)
        if self.log_weights is None:
            self.log_weights = np.full(J, -math.log(J))
        self._sync_weights()

    def __len__(self):
        return len(self.particles)

    def __iter__(self):
        return iter(self.particles)

    def __getitem__(self, j):
        return self.particles[j]

    @property
    def weights(self):
        return np.exp(self.log_weights)

    @property
    def group_size(self):
        return len(self.particles) // self.groups

    def group_members(self, g):
        b = self.group_size
        return list(range(g * b, (g + 1) * b))

    def states(self):
        return np.array([p.state for p in self.particles])

    def all_converged(self):
        return all(p.map is not None and p.map.converged for p in self.particles)

    def _sync_weights(self):
        for p, lw in zip(self.particles, self.log_weights):
            p.weight = float(math.exp(lw))


def make_particle_set(n, initial_pose, *, motion_noise=(0.0, 0.0, 0.0, 0.0),
                      meas_noise=1.0, groups=1, seed=0, same_streams=False, **kwargs):
    """``n`` particles sitting at ``initial_pose`` with independent RNG streams.

    ``same_streams`` gives every particle the same seeds instead, which
    makes noiseless particles evolve identically.
    """
    if same_streams:
        seeds = [np.random.SeedSequence(seed).spawn(1)[0] for _ in range(n)]
    else:
        seeds = np.random.SeedSequence(seed).spawn(n)
    particles = []
    for j, ss in enumerate(seeds):
        motion_ss, batch_ss = ss.spawn(2)
        hist = TrajectoryHistory()
        hist.append(initial_pose.t, initial_pose.state)
        particles.append(Particle(j, hist, None, 1.0 / n,
                                  np.random.default_rng(motion_ss),
                                  np.random.default_rng(batch_ss)))
    return ParticleSet(particles, np.asarray(motion_noise, float), meas_noise,
                       groups=groups, **kwargs)


def motion_model(state, control, dt):
    """Unicycle (plus sway) propagation of ``[x, y, z, yaw]`` rows."""
    state = np.atleast_2d(state)
    yaw = state[:, 3]
    c, s = np.cos(yaw), np.sin(yaw)
    out = state.copy()
    out[:, 0] += dt * (control.surge * c - control.sway * s)
    out[:, 1] += dt * (control.surge * s + control.sway * c)
    if control.z is not None:
        out[:, 2] = control.z
    out[:, 3] = wrap_angle(yaw + control.yaw_rate * dt)
    return out


def predict(particles, control, dt):
    """Advance every particle by one control step with additive noise
    ``N(0, W dt)`` drawn from its own motion stream."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    new = motion_model(particles.states(), control, dt)
    std = np.sqrt(particles.motion_noise * dt)
    if np.any(std > 0):
        noise = np.array([p.motion_rng.standard_normal(4) for p in particles.particles])
        new += np.where(std > 0, noise, 0.0) * std
        new[:, 3] = wrap_angle(new[:, 3])
    for p, s in zip(particles.particles, new):
        p.history.append(control.t, s)
    return particles


def build_minibatch(particle, beam_log, index, size, rng=None):
    """Draw ``size`` log beams and project them through the particle's past.

    Returns ``(X, y)``: horizontal map-frame positions ``(size, 2)`` and
    depths relative to the map's depth offset ``(size,)``.
    """
    rng = particle.batch_rng if rng is None else rng
    beams, times = beam_log.sample_uniform(size, rng)
    states = states_at(particle.history, index, times)
    pts = transform_beams(states, beams)
    offset = particle.map.depth_offset if particle.map is not None else 0.0
    return pts[:, :2], pts[:, 2] - offset


def train_step(model, X, y, n_total, lr, window=svgp.DEFAULT_WINDOW,
               threshold=svgp.DEFAULT_THRESHOLD):
    """One optimiser step followed by the convergence bookkeeping."""
    svgp.optimizer_step(model, X, y, n_total, lr)
    svgp.convergence_check(model, window, threshold)
    return model


def svgp_iteration(particle, beam_log, index, size, lr, **conv):
    """Build one minibatch for ``particle`` and take one optimiser step."""
    if len(beam_log) == 0:
        raise EmptyDatasetError("no beams logged yet")
    X, y = build_minibatch(particle, beam_log, index, size)
    train_step(particle.map, X, y, len(beam_log), lr, **conv)
    return particle


def weight_beams(ping, k):
    """Indices of ``k`` beams spread evenly across the swath."""
    n = len(ping)
    if n <= k:
        return np.arange(n)
    return np.unique(np.round(np.linspace(0, n - 1, k)).astype(int))


def ping_log_likelihood(model, state, ping, meas_noise, beams):
    """Sum of per-beam Gaussian log densities of the observed depths under
    the map's predictive distribution plus ``meas_noise``."""
    pts = transform_beams(state, ping.beams[beams])
    pred = svgp.posterior(model, pts[:, :2])
    var = pred.variance + meas_noise
    resid = pts[:, 2] - model.depth_offset - pred.mean
    return float(np.sum(-0.5 * (LOG_2PI + np.log(var)) - 0.5 * resid * resid / var))


def weigh_particles(particles, ping, loglik=None):
    """Multiply each weight by its ping likelihood and renormalise.

    ``loglik`` lets the caller supply per-particle log-likelihoods computed
    elsewhere (e.g. inside trainer contexts); ``nan`` marks a failure.
    """
    if loglik is None:
        beams = weight_beams(ping, particles.beams_per_weight)
        loglik = np.empty(len(particles))
        for j, p in enumerate(particles):
            try:
                loglik[j] = ping_log_likelihood(p.map, p.state, ping,
                                                particles.meas_noise, beams)
            except (svgp.NumericalError, np.linalg.LinAlgError) as exc:
                log.warning("particle %d: posterior failed (%s)", p.id, exc)
                loglik[j] = np.nan
    loglik = np.asarray(loglik, dtype=float)
    bad = ~np.isfinite(loglik)
    if bad.all():
        log.warning("every particle failed to weigh; weights left unchanged")
        return particles
    if bad.any():
        loglik = np.where(bad, loglik[~bad].min(), loglik)
        log.warning("%d particle(s) given the minimum weight", int(bad.sum()))
    lw = particles.log_weights + loglik
    particles.log_weights = lw - logsumexp(lw)
    particles._sync_weights()
    return particles


def effective_sample_size(particles):
    w = particles.weights if isinstance(particles, ParticleSet) else np.asarray(particles)
    return 1.0 / float(np.sum(w * w))


def systematic_indices(weights, rng):
    """Ancestor index for each of ``J`` offspring (single uniform offset)."""
    w = np.asarray(weights, dtype=float)
    J = len(w)
    cum = np.cumsum(w / w.sum())
    cum[-1] = 1.0
    u = (rng.uniform() + np.arange(J)) / J
    return np.searchsorted(cum, u, side="right")


def should_resample(particles):
    ess = effective_sample_size(particles)
    half = len(particles) / 2.0
    return ess < half if particles.resample_when == "below" else ess > half


def resample(particles, rng, ancestors=None):
    """Systematic resampling; returns the ancestor index array.

    Each surviving tail is sealed once and shared; every offspring gets the
    survivor's handles, a fresh tail and a deep copy of its map (optimiser
    state included).  Weights reset to uniform.
    """
    old = particles.particles
    J = len(old)
    if ancestors is None:
        ancestors = systematic_indices(particles.weights, rng)
    tail_len = len(old[0].history.tail)
    if tail_len:
        particles.index.seal(old[0].history.tail.times[0], tail_len)
    handles = {}
    for a in np.unique(ancestors):
        handles[a] = old[a].history.sealed_handles()
    new = []
    used = set()
    for j, a in enumerate(ancestors):
        src = old[a]
        # the first offspring of a survivor may keep its map object
        model = src.map if a not in used else (src.map.copy() if src.map is not None else None)
        used.add(a)
        new.append(Particle(j, TrajectoryHistory(handles[a]), model, 1.0 / J,
                            old[j].motion_rng, old[j].batch_rng))
    particles.particles = new
    particles.log_weights = np.full(J, -math.log(J))
    particles._sync_weights()
    return ancestors


@dataclass
class PromptResult:
    t: float
    ran: bool
    ess: float = float("nan")
    resampled: bool = False
    ancestors: np.ndarray | None = None


def lc_prompting(particles, ping, rng, loglik=None):
    """Weight against ``ping`` and resample if the ESS rule fires.

    Gated on every map having converged; otherwise nothing happens.
    """
    if not particles.all_converged():
        return PromptResult(ping.t, False)
    weigh_particles(particles, ping, loglik)
    ess = effective_sample_size(particles)
    if should_resample(particles):
        anc = resample(particles, rng)
        return PromptResult(ping.t, True, ess, True, anc)
    return PromptResult(ping.t, True, ess, False)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    def __len__(self):
        return len(self.times)

    def poses(self):
        return [Pose.from_state(t, s) for t, s in zip(self.times, self.states)]

    @classmethod
    def from_poses(cls, poses):
        poses = list(poses)
        return cls(np.array([p.t for p in poses]), np.array([p.state for p in poses]))


def estimate_trajectory(particles):
    """Average of all particle histories (circular mean for yaw)."""
    mats = [p.history.materialize() for p in particles]
    times = mats[0][0]
    S = np.stack([m[1] for m in mats])
    est = S.mean(axis=0)
    est[:, 3] = np.arctan2(np.sin(S[:, :, 3]).mean(axis=0), np.cos(S[:, :, 3]).mean(axis=0))
    est[:, 3] = wrap_angle(est[:, 3])
    return Trajectory(times, est)
