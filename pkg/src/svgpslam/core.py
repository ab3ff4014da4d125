"""Shared domain types: poses, controls, pings and the append-only beam log.

Frame conventions used throughout the package:

* map frame is east/north/up with ``z`` positive up, so seabed depths are
  negative numbers (a floor 40 m below the surface has ``z = -40``);
* beams are stored in the vehicle frame at acquisition time: ``x`` forward,
  ``y`` to port, ``z`` up, relative to the vehicle reference point;
* a pose is 4-DOF (x, y, z, yaw); roll and pitch are fixed at zero.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np


class OrderingError(ValueError):
    """A timestamp arrived out of order."""


class EmptyDatasetError(ValueError):
    """An operation needed data but the log is empty."""


def wrap_angle(a):
    """Wrap angle(s) into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


@dataclass(frozen=True)
class Pose:
    t: float
    position: np.ndarray
    heading: float

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        if not (math.isfinite(self.t) and self.t >= 0.0):
            raise ValueError(f"pose timestamp must be finite and >= 0, got {self.t}")
        if not (np.all(np.isfinite(pos)) and math.isfinite(self.heading)):
            raise ValueError("pose must be finite")
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))

    @classmethod
    def from_state(cls, t, state):
        """Build from a ``[x, y, z, yaw]`` row."""
        return cls(t, state[:3], state[3])

    @property
    def state(self):
        return np.array([*self.position, self.heading])

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (self.t == other.t and self.heading == other.heading
                and np.array_equal(self.position, other.position))

    __hash__ = None


@dataclass(frozen=True)
class ControlInput:
    """Body-frame velocities applied over one propagation step.

    ``sway`` and ``z`` extend the plain unicycle so that dead-reckoning
    increments with lateral slip replay exactly; ``z`` is an absolute depth
    taken from the navigation input (``None`` keeps the current depth).
    """

    t: float
    surge: float
    yaw_rate: float
    sway: float = 0.0
    z: float | None = None

    def __post_init__(self):
        vals = [self.t, self.surge, self.yaw_rate, self.sway]
        if self.z is not None:
            vals.append(self.z)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("control input must be finite")


@dataclass(frozen=True)
class Ping:
    """One multibeam swath: ``beams`` is ``(n, 3)`` in the vehicle frame,
    ordered port to starboard."""

    t: float
    beams: np.ndarray

    MAX_BEAMS = 4096

    def __post_init__(self):
        b = np.asarray(self.beams, dtype=float)
        if b.ndim != 2 or b.shape[1] != 3:
            raise ValueError(f"beams must have shape (n, 3), got {b.shape}")
        if not 1 <= len(b) <= self.MAX_BEAMS:
            raise ValueError(f"ping must hold 1..{self.MAX_BEAMS} beams, got {len(b)}")
        if not np.all(np.isfinite(b)) or not math.isfinite(self.t):
            raise ValueError("ping must be finite")
        b.setflags(write=False)
        object.__setattr__(self, "beams", b)
        object.__setattr__(self, "t", float(self.t))

    def __len__(self):
        return len(self.beams)


@dataclass(frozen=True)
class TrainingPoint:
    x: np.ndarray
    y: float


def transform_beam(pose, beam):
    """Map a vehicle-frame beam into the map frame under ``pose``."""
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    bx, by, bz = np.asarray(beam, dtype=float)
    px, py, pz = pose.position
    return np.array([px + c * bx - s * by, py + s * bx + c * by, pz + bz])


def transform_beams(states, beams):
    """Vectorised :func:`transform_beam`.

    ``states`` is ``(M, 4)`` or ``(4,)`` rows of ``[x, y, z, yaw]``;
    ``beams`` is ``(M, 3)``.
    """
    states = np.atleast_2d(states)
    c, s = np.cos(states[:, 3]), np.sin(states[:, 3])
    out = np.empty((len(beams), 3))
    out[:, 0] = states[:, 0] + c * beams[:, 0] - s * beams[:, 1]
    out[:, 1] = states[:, 1] + s * beams[:, 0] + c * beams[:, 1]
    out[:, 2] = states[:, 2] + beams[:, 2]
    return out


@dataclass
class BeamLog:
    """Append-only log of every beam received so far.

    One writer appends; readers may sample concurrently. The published
    record count ``n_records`` is bumped only after a whole ping has been
    written, so readers never see a partial ping.
    """

    capacity: int = 4096
    _beams: np.ndarray = field(init=False, repr=False)
    _times: np.ndarray = field(init=False, repr=False)
    _ping_index: np.ndarray = field(init=False, repr=False)
    _offsets: list = field(init=False, repr=False)
    _ping_times: list = field(init=False, repr=False)
    _n: int = field(init=False, default=0)

    def __post_init__(self):
        self._beams = np.empty((self.capacity, 3))
        self._times = np.empty(self.capacity)
        self._ping_index = np.empty(self.capacity, dtype=np.int64)
        self._offsets = [0]
        self._ping_times = []
        self._lock = threading.Lock()

    @property
    def n_records(self):
        return self._n

    @property
    def n_pings(self):
        return len(self._ping_times)

    def __len__(self):
        return self._n

    @property
    def last_time(self):
        return self._ping_times[-1] if self._ping_times else None

    def _grow(self, need):
        cap = max(need, 2 * len(self._beams))
        beams = np.empty((cap, 3))
        times = np.empty(cap)
        pidx = np.empty(cap, dtype=np.int64)
        beams[: self._n] = self._beams[: self._n]
        times[: self._n] = self._times[: self._n]
        pidx[: self._n] = self._ping_index[: self._n]
        # Swap in complete copies; readers holding the old arrays still see
        # consistent data for every published record.
        self._beams, self._times, self._ping_index = beams, times, pidx

    def append_ping(self, ping):
        """Append all beams of ``ping``; returns the log for chaining."""
        with self._lock:
            if self._ping_times and ping.t < self._ping_times[-1]:
                raise OrderingError(
                    f"ping at t={ping.t} precedes log tail t={self._ping_times[-1]}")
            n0, n = self._n, len(ping)
            if n0 + n > len(self._beams):
                self._grow(n0 + n)
            self._beams[n0:n0 + n] = ping.beams
            self._times[n0:n0 + n] = ping.t
            self._ping_index[n0:n0 + n] = len(self._ping_times)
            self._ping_times.append(ping.t)
            self._offsets.append(n0 + n)
            self._n = n0 + n
        return self

    def records(self, start=0, stop=None):
        """Views of ``(beams, times, ping_index)`` for a published range."""
        n = self._n
        stop = n if stop is None else min(stop, n)
        return (self._beams[start:stop], self._times[start:stop],
                self._ping_index[start:stop])

    def ping_range(self, ping_index):
        """Record range ``[start, stop)`` covered by one ping."""
        return self._offsets[ping_index], self._offsets[ping_index + 1]

    def time_range(self, t0, t1):
        """Record range of pings with ``t0 <= t <= t1``."""
        times = np.asarray(self._ping_times)
        i0 = int(np.searchsorted(times, t0, side="left"))
        i1 = int(np.searchsorted(times, t1, side="right"))
        return self._offsets[i0], self._offsets[i1]

    def sample_uniform(self, count, rng):
        """Draw ``count`` records uniformly with replacement.

        Returns ``(beams, times)`` as ``(count, 3)`` and ``(count,)`` arrays.
        """
        n = self._n
        if n == 0:
            raise EmptyDatasetError("cannot sample from an empty beam log")
        if count < 1:
            raise ValueError("count must be >= 1")
        idx = rng.integers(0, n, size=count)
        beams, times = self._beams, self._times
        return beams[idx], times[idx]


def append_ping(log, ping):
    return log.append_ping(ping)


def sample_uniform(log, count, rng):
    return log.sample_uniform(count, rng)
