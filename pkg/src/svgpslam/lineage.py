"""Particle trajectory histories stored as shared, sealed segments.

Every particle appends poses to its own open tail segment.  When the
filter resamples, each surviving tail is sealed once and becomes an
immutable segment that all offspring reference by handle; the offspring
then start fresh tails.  Copying a history therefore copies a short tuple
of handles, never poses, and no ancestry tree is needed to answer "where
was particle j at time t".

Because every particle is propagated and resampled in lockstep, all
histories share the same segment boundaries.  Those boundaries live once
in a :class:`SegmentIndex`.
"""

from __future__ import annotations

import itertools
from bisect import bisect_right

import numpy as np

from .core import OrderingError, Pose

_segment_ids = itertools.count()


class TrajectorySegment:
    """Growable run of ``(t, [x, y, z, yaw])`` samples with strictly
    increasing timestamps.  Once sealed it never changes."""

    created = 0  # construction counter, used to check that nothing is copied

    def __init__(self, capacity=64):
        self._t = np.empty(capacity)
        self._s = np.empty((capacity, 4))
        self._n = 0
        self.sealed = False
        self.uid = next(_segment_ids)
        TrajectorySegment.created += 1

    def __len__(self):
        return self._n

    @property
    def times(self):
        return self._t[: self._n]

    @property
    def states(self):
        return self._s[: self._n]

    def append(self, t, state):
        if self.sealed:
            raise RuntimeError("cannot append to a sealed segment")
        if self._n and t <= self._t[self._n - 1]:
            raise OrderingError(
                f"segment timestamps must increase: {t} after {self._t[self._n - 1]}")
        if self._n == len(self._t):
            cap = 2 * len(self._t)
            self._t = np.resize(self._t, cap)
            self._s = np.resize(self._s, (cap, 4))
        self._t[self._n] = t
        self._s[self._n] = state
        self._n += 1

    def seal(self):
        if not self.sealed:
            self._t = self._t[: self._n].copy()
            self._s = self._s[: self._n].copy()
            self._t.setflags(write=False)
            self._s.setflags(write=False)
            self.sealed = True
        return self


class TrajectoryHistory:
    """Sealed segment handles plus one owned, mutable tail."""

    __slots__ = ("handles", "tail")

    def __init__(self, handles=(), tail=None):
        self.handles = tuple(handles)
        self.tail = TrajectorySegment() if tail is None else tail

    def append(self, t, state):
        if not len(self.tail) and self.handles and t <= self.handles[-1].times[-1]:
            raise OrderingError(f"history timestamps must increase: {t}")
        self.tail.append(t, state)

    def sealed_handles(self):
        """Seal the tail in place and return the full handle tuple.

        An empty tail is not turned into a segment.
        """
        if len(self.tail):
            return self.handles + (self.tail.seal(),)
        return self.handles

    def segments(self):
        return self.handles + ((self.tail,) if len(self.tail) else ())

    def __len__(self):
        return sum(len(s) for s in self.handles) + len(self.tail)

    @property
    def latest(self):
        seg = self.tail if len(self.tail) else self.handles[-1]
        return seg.times[-1], seg.states[-1]

    def materialize(self):
        """Full ``(times, states)`` copy of the history."""
        segs = self.segments()
        return (np.concatenate([s.times for s in segs]),
                np.concatenate([s.states for s in segs]))


class SegmentIndex:
    """Start times and lengths of the sealed segments, shared by all
    particles of one filter."""

    def __init__(self):
        self.starts = []
        self.lengths = []

    def seal(self, start_time, length):
        if self.starts and start_time <= self.starts[-1]:
            raise OrderingError("segment start times must increase")
        self.starts.append(float(start_time))
        self.lengths.append(int(length))

    @property
    def total_sealed(self):
        return sum(self.lengths)

    def __len__(self):
        return len(self.starts)


def _locate(history, index, t):
    nseg = len(index.starts)
    if len(history.handles) != nseg:
        raise ValueError(
            f"history has {len(history.handles)} sealed segments, index has {nseg}")
    tail = history.tail
    if len(tail) and t >= tail.times[0]:
        return tail
    k = bisect_right(index.starts, t) - 1
    if k < 0:
        raise ValueError(f"time {t} precedes the first pose of the history")
    return history.handles[k]


def pose_at(history, index, t):
    """Pose held at time ``t`` (zero-order hold on the stored samples)."""
    t_last, _ = history.latest
    if t > t_last:
        raise ValueError(f"time {t} is after the latest pose at {t_last}")
    seg = _locate(history, index, t)
    i = int(np.searchsorted(seg.times, t, side="right")) - 1
    if i < 0:
        raise ValueError(f"time {t} precedes the first pose of the history")
    return Pose.from_state(seg.times[i], seg.states[i])


def states_at(history, index, times):
    """Vectorised :func:`pose_at` returning ``(len(times), 4)`` states."""
    times = np.asarray(times, dtype=float)
    segs = history.segments()
    starts = np.array(index.starts + ([history.tail.times[0]] if len(history.tail) else []))
    if len(segs) != len(starts):
        raise ValueError("history and segment index disagree")
    if len(times) and (times.min() < starts[0] or times.max() > history.latest[0]):
        raise ValueError("query time outside the history's time span")
    which = np.searchsorted(starts, times, side="right") - 1
    out = np.empty((len(times), 4))
    for k in np.unique(which):
        sel = which == k
        seg = segs[k]
        i = np.searchsorted(seg.times, times[sel], side="right") - 1
        out[sel] = seg.states[i]
    return out
