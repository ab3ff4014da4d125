"""Reading and writing the delimited survey-log format.

One row per beam::

    ping_id,t,beam_x,beam_y,beam_z,dr_x,dr_y,dr_z,dr_yaw[,gt_x,gt_y,gt_z,gt_yaw]

Beams are in the vehicle frame, DR/ground-truth poses are those of the
vehicle at the ping time.  A header row is required; ground-truth columns
are optional.  Floats are written with 17 significant digits so a file
round-trips bit-exactly.
"""

from __future__ import annotations

import csv
import io
import time

import numpy as np

from .core import OrderingError, Ping, Pose
from .filter import Trajectory
from .sim import SurveyData

BASE_COLUMNS = ["ping_id", "t", "beam_x", "beam_y", "beam_z",
                "dr_x", "dr_y", "dr_z", "dr_yaw"]
GT_COLUMNS = ["gt_x", "gt_y", "gt_z", "gt_yaw"]


class LogFormatError(ValueError):
    """Malformed survey log; ``line`` is the 1-based line number."""

    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


def write_log(data, path):
    with_gt = data.truth is not None
    cols = BASE_COLUMNS + (GT_COLUMNS if with_gt else [])
    blocks = []
    for i, ping in enumerate(data.pings):
        n = len(ping)
        parts = [np.full((n, 1), i), np.full((n, 1), ping.t), ping.beams,
                 np.tile(data.dr.states[i], (n, 1))]
        if with_gt:
            parts.append(np.tile(data.truth.states[i], (n, 1)))
        blocks.append(np.hstack(parts))
    table = np.vstack(blocks) if blocks else np.empty((0, len(cols)))
    fmt = ["%d"] + ["%.17g"] * (len(cols) - 1)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        if len(table):
            np.savetxt(fh, table, fmt=fmt, delimiter=",")


def _locate_error(path, ncols):
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if lineno == 1:
                continue
            if len(row) != ncols:
                raise LogFormatError(f"expected {ncols} columns, found {len(row)}", lineno)
            try:
                [float(v) for v in row]
            except ValueError as exc:
                raise LogFormatError(str(exc), lineno) from None
    raise LogFormatError("unparseable log")


def read_table(path):
    """Parse a survey log into ``(columns, table)``."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        body = fh.read()
    if not header:
        raise LogFormatError("missing header row", 1)
    cols = [c.strip() for c in header.split(",")]
    if cols not in (BASE_COLUMNS, BASE_COLUMNS + GT_COLUMNS):
        raise LogFormatError(f"unexpected header {cols}", 1)
    if not body.strip():
        return cols, np.empty((0, len(cols)))
    try:
        table = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2)
    except ValueError:
        _locate_error(path, len(cols))
        raise
    if table.shape[1] != len(cols):
        _locate_error(path, len(cols))
    return cols, table


def ingest_log(path):
    """Load a survey log into :class:`~svgpslam.sim.SurveyData`."""
    cols, table = read_table(path)
    with_gt = len(cols) > len(BASE_COLUMNS)
    if not len(table):
        empty = Trajectory(np.empty(0), np.empty((0, 4)))
        return SurveyData([], empty, empty if with_gt else None)
    ping_id, t = table[:, 0], table[:, 1]
    if np.any(np.diff(t) < 0):
        bad = int(np.flatnonzero(np.diff(t) < 0)[0]) + 3
        raise LogFormatError("timestamps are not monotone", bad)
    starts = np.flatnonzero(np.r_[True, ping_id[1:] != ping_id[:-1]])
    stops = np.r_[starts[1:], len(table)]
    if len(np.unique(ping_id[starts])) != len(starts):
        raise LogFormatError("ping rows are not contiguous")
    pings = [Ping(t[a], table[a:b, 2:5]) for a, b in zip(starts, stops)]
    times = t[starts]
    dr = Trajectory(times.copy(), table[starts, 5:9].copy())
    gt = Trajectory(times.copy(), table[starts, 9:13].copy()) if with_gt else None
    return SurveyData(pings, dr, gt)


def stream(data, pacing="max", factor=1.0):
    """Yield ``(ping, dr_pose, truth_pose_or_None)`` in time order.

    ``pacing="max"`` streams as fast as the consumer pulls;
    ``pacing="wallclock"`` releases each ping at its mission time divided
    by ``factor``.
    """
    if pacing not in ("max", "wallclock"):
        raise ValueError(f"unknown pacing {pacing!r}")
    t0 = None
    last = -np.inf
    for i, ping in enumerate(data.pings):
        if ping.t < last:
            raise OrderingError(f"ping {i} at t={ping.t} is out of order")
        last = ping.t
        if pacing == "wallclock":
            if t0 is None:
                t0 = (time.monotonic(), ping.t)
            due = t0[0] + (ping.t - t0[1]) / factor
            delay = due - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        dr = Pose.from_state(data.dr.times[i], data.dr.states[i])
        gt = (Pose.from_state(data.truth.times[i], data.truth.states[i])
              if data.truth is not None else None)
        yield ping, dr, gt
