"""Map and trajectory error metrics, raster export and throughput tables.

The map metric is a gridded consistency error.  Reference soundings are
binned into square cells; for every cell holding at least one sounding the
error is the absolute difference between their mean depth and the map's
posterior mean at the cell centre.  The RMSE over the occupied cells
summarises the map.  This is a stand-in for the published consistency
metric, isolated in :func:`consistency_error` so it can be swapped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import svgp

NODATA = -9999.0


@dataclass
class GridMap:
    """Raster over ``bounds = (xmin, ymin, xmax, ymax)``.

    ``values[r, c]`` is the cell whose lower-left corner is
    ``(xmin + c * cell_size, ymin + r * cell_size)``, so row 0 is the
    southern edge.  ``mask`` marks valid cells.
    """

    bounds: tuple
    cell_size: float
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell size must be positive")
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape:
            raise ValueError("values and mask shapes differ")
        if not np.all(np.isfinite(self.values[self.mask])):
            raise ValueError("valid cells must hold finite values")

    @property
    def shape(self):
        return self.values.shape

    def centers(self):
        return cell_centers(self.bounds, self.cell_size)

    def write(self, path):
        """Write as an ESRI ASCII grid (north row first)."""
        nrows, ncols = self.shape
        out = np.where(self.mask, self.values, NODATA)[::-1]
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"ncols {ncols}\nnrows {nrows}\n")
            fh.write(f"xllcorner {self.bounds[0]!r}\nyllcorner {self.bounds[1]!r}\n")
            fh.write(f"cellsize {self.cell_size!r}\nNODATA_value {NODATA!r}\n")
            np.savetxt(fh, out, fmt="%.17g", delimiter=" ")

    @classmethod
    def read(cls, path):
        header = {}
        with open(path, encoding="utf-8") as fh:
            for _ in range(6):
                key, val = fh.readline().split()
                header[key.lower()] = float(val)
            data = np.loadtxt(fh, ndmin=2)
        ncols, nrows = int(header["ncols"]), int(header["nrows"])
        cs = header["cellsize"]
        x0, y0 = header["xllcorner"], header["yllcorner"]
        data = data.reshape(nrows, ncols)[::-1]
        mask = data != header["nodata_value"]
        bounds = (x0, y0, x0 + ncols * cs, y0 + nrows * cs)
        return cls(bounds, cs, np.where(mask, data, 0.0), mask)


def grid_shape(bounds, cell_size):
    xmin, ymin, xmax, ymax = bounds
    if not (xmax > xmin and ymax > ymin):
        raise ValueError(f"degenerate bounds {bounds}")
    if not cell_size > 0:
        raise ValueError("cell size must be positive")
    ncols = max(1, math.ceil((xmax - xmin) / cell_size - 1e-9))
    nrows = max(1, math.ceil((ymax - ymin) / cell_size - 1e-9))
    return nrows, ncols


def cell_centers(bounds, cell_size):
    """``(nrows * ncols, 2)`` cell centres in row-major order."""
    nrows, ncols = grid_shape(bounds, cell_size)
    xs = bounds[0] + (np.arange(ncols) + 0.5) * cell_size
    ys = bounds[1] + (np.arange(nrows) + 0.5) * cell_size
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def bin_points(points, bounds, cell_size):
    """Mean depth and count per cell of the ``(N, 3)`` points inside ``bounds``."""
    nrows, ncols = grid_shape(bounds, cell_size)
    pts = np.asarray(points, dtype=float)
    c = np.floor((pts[:, 0] - bounds[0]) / cell_size).astype(np.int64)
    r = np.floor((pts[:, 1] - bounds[1]) / cell_size).astype(np.int64)
    inside = (c >= 0) & (c < ncols) & (r >= 0) & (r < nrows)
    flat = r[inside] * ncols + c[inside]
    count = np.bincount(flat, minlength=nrows * ncols)
    total = np.bincount(flat, weights=pts[inside, 2], minlength=nrows * ncols).astype(float)
    mean = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return mean.reshape(nrows, ncols), count.reshape(nrows, ncols)


def points_bounds(points, cell_size):
    """Smallest cell-aligned rectangle holding every point."""
    pts = np.asarray(points, dtype=float)
    lo = np.floor(pts[:, :2].min(axis=0) / cell_size) * cell_size
    hi = (np.floor(pts[:, :2].max(axis=0) / cell_size) + 1) * cell_size
    return (lo[0], lo[1], hi[0], hi[1])


def predict_mean(model, X, batch=8192):
    """Absolute-depth posterior mean at ``X`` in batches."""
    out = np.empty(len(X))
    for a in range(0, len(X), batch):
        out[a:a + batch] = svgp.posterior(model, X[a:a + batch]).mean
    return out + model.depth_offset


def consistency_error(reference, model, cell_size=1.0, bounds=None):
    """Per-cell ``|mean reference depth - posterior mean|`` and its RMSE.

    ``reference`` holds map-frame soundings ``(N, 3)``.  Cells without a
    sounding are masked out.
    """
    reference = np.asarray(reference, dtype=float).reshape(-1, 3)
    if not len(reference):
        raise ValueError("no reference soundings")
    if bounds is None:
        bounds = points_bounds(reference, cell_size)
    mean, count = bin_points(reference, bounds, cell_size)
    valid = count > 0
    if not valid.any():
        raise ValueError("no reference soundings fall inside the grid")
    centers = cell_centers(bounds, cell_size)
    flat_valid = valid.ravel()
    err = np.zeros(valid.size)
    err[flat_valid] = np.abs(mean.ravel()[flat_valid] - predict_mean(model, centers[flat_valid]))
    err = err.reshape(valid.shape)
    rmse = float(np.sqrt(np.mean(err[valid] ** 2)))
    return GridMap(tuple(bounds), cell_size, err, valid), rmse


@dataclass
class TrajectoryError:
    times: np.ndarray
    errors: np.ndarray
    rmse: float
    terminal: float


def hold_states(truth, times):
    """Zero-order hold of ``truth`` states onto ``times``."""
    idx = np.searchsorted(truth.times, times, side="right") - 1
    return truth.states[idx]


def trajectory_error(estimate, truth):
    """Horizontal error of ``estimate`` against zero-order-held ``truth``
    over their common time span."""
    if not len(estimate) or not len(truth):
        raise ValueError("empty trajectory")
    t = np.asarray(estimate.times)
    keep = (t >= truth.times[0]) & (t <= truth.times[-1])
    if not keep.any():
        raise ValueError("estimate and truth time ranges do not overlap")
    t = t[keep]
    ref = hold_states(truth, t)
    err = np.hypot(*(estimate.states[keep, :2] - ref[:, :2]).T)
    return TrajectoryError(t, err, float(np.sqrt(np.mean(err ** 2))), float(err[-1]))


def export_map_grid(model, bounds, cell_size=1.0, batch=8192):
    """Posterior mean (absolute depth) and variance rasters plus ``Z``."""
    nrows, ncols = grid_shape(bounds, cell_size)
    centers = cell_centers(bounds, cell_size)
    mean = np.empty(len(centers))
    var = np.empty(len(centers))
    for a in range(0, len(centers), batch):
        pred = svgp.posterior(model, centers[a:a + batch])
        mean[a:a + batch] = pred.mean
        var[a:a + batch] = pred.variance
    mean += model.depth_offset
    full = np.ones((nrows, ncols), dtype=bool)
    return (GridMap(tuple(bounds), cell_size, mean.reshape(nrows, ncols), full),
            GridMap(tuple(bounds), cell_size, var.reshape(nrows, ncols), full.copy()),
            model.Z.copy())


def throughput_report(iterations, seconds=None, particles=None, groups=None):
    """Per-particle iteration counts plus the wall-clock rate.

    ``iterations`` are per-particle counts (or models, whose step counters
    are read).  ``seconds`` is the training wall time of the run.
    """
    counts = np.array([m.iterations if isinstance(m, svgp.SvgpModel) else int(m)
                       for m in iterations], dtype=int)
    rep = {
        "particles": len(counts) if particles is None else particles,
        "groups": groups,
        "per_particle": counts,
        "average": float(counts.mean()) if len(counts) else 0.0,
        "min": int(counts.min()) if len(counts) else 0,
        "max": int(counts.max()) if len(counts) else 0,
        "total": int(counts.sum()),
    }
    if seconds is not None:
        rep["seconds"] = float(seconds)
        rep["rate"] = rep["total"] / seconds if seconds > 0 else float("inf")
    return rep


def fmt(value):
    """Deterministic text form of a report value."""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_table(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def read_table(path):
    """``(header, rows)`` of a delimited report file; numbers parsed."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = []
        for line in fh:
            line = line.strip()
            if line:
                rows.append([_parse(v) for v in line.split(",")])
    return header, rows


def _parse(v):
    if v in ("true", "false"):
        return v == "true"
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


@dataclass
class RunReport:
    """Summary of one run; every field is recomputable from the run's dumps."""

    map_rmse: list
    error_grids: list
    iterations: np.ndarray
    elbo_traces: list
    resample_events: list
    dr_error: TrajectoryError | None = None
    rbpf_error: TrajectoryError | None = None
    cloud_errors: list = None
    converged: list = None

    @property
    def mean_map_rmse(self):
        return float(np.mean(self.map_rmse))

    def summary_rows(self):
        it = throughput_report(self.iterations)
        rows = [("particles", len(self.map_rmse)),
                ("map_rmse_mean", self.mean_map_rmse),
                ("iterations_average", it["average"]),
                ("iterations_min", it["min"]),
                ("iterations_max", it["max"]),
                ("iterations_total", it["total"]),
                ("resample_events", len(self.resample_events)),
                ("all_converged", bool(self.converged and all(self.converged)))]
        if self.dr_error is not None:
            rows += [("dr_rmse", self.dr_error.rmse), ("dr_terminal", self.dr_error.terminal)]
        if self.rbpf_error is not None:
            rows += [("rbpf_rmse", self.rbpf_error.rmse),
                     ("rbpf_terminal", self.rbpf_error.terminal)]
        for j, r in enumerate(self.map_rmse):
            rows.append((f"map_rmse_{j:03d}", r))
        return rows

    def write(self, directory):
        """Write ``report.csv`` and its companion tables/grids."""
        import os
        os.makedirs(directory, exist_ok=True)
        p = lambda name: os.path.join(directory, name)  # noqa: E731
        write_table(p("report.csv"), ["metric", "value"], self.summary_rows())
        write_table(p("iterations.csv"), ["particle", "iterations", "converged"],
                    [(j, n, c) for j, (n, c) in
                     enumerate(zip(self.iterations, self.converged or []))])
        write_table(p("elbo.csv"), ["particle", "iteration", "elbo"],
                    [(j, i, e) for j, tr in enumerate(self.elbo_traces) for i, e in tr])
        for j, g in enumerate(self.error_grids):
            g.write(p(f"consistency_{j:03d}.asc"))
        if self.dr_error is not None and self.rbpf_error is not None:
            rb = dict(zip(self.rbpf_error.times, self.rbpf_error.errors))
            write_table(p("trajectory_error.csv"), ["t", "dr_error", "rbpf_error"],
                        [(t, e, rb.get(t, float("nan")))
                         for t, e in zip(self.dr_error.times, self.dr_error.errors)])
        if self.cloud_errors:
            write_table(p("resample_errors.csv"), ["t", "error_before", "error_after"],
                        self.cloud_errors)
