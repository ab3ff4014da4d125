import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svgpslam.evaluation import (GridMap, RunReport, TrajectoryError, consistency_error,
                                 export_map_grid, read_table, throughput_report,
                                 trajectory_error, write_table)
from svgpslam.filter import Trajectory
from svgpslam.svgp import KernelParams, new_model, optimizer_step, posterior


def flat_model(depth=-40.0, S=16):
    Z = np.random.default_rng(0).uniform(0, 10, size=(S, 2))
    return new_model(Z, KernelParams.from_values(2.0, 5.0, 0.1), depth_offset=depth)


def grid_points(depth_fn, n=10):
    xs = np.arange(n) + 0.5
    gx, gy = np.meshgrid(xs, xs)
    xy = np.column_stack([gx.ravel(), gy.ravel()])
    return np.column_stack([xy, depth_fn(xy)])


# -- grids ---------------------------------------------------------------------

def test_grid_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    values = rng.normal(size=(3, 5))
    mask = rng.uniform(size=(3, 5)) > 0.3
    g = GridMap((10.0, -5.0, 12.5, -3.5), 0.5, np.where(mask, values, 0.0), mask)
    g.write(tmp_path / "g.asc")
    back = GridMap.read(tmp_path / "g.asc")
    assert back.bounds == g.bounds and back.cell_size == 0.5
    np.testing.assert_array_equal(back.mask, mask)
    np.testing.assert_array_equal(back.values[mask], values[mask])


def test_grid_north_row_first(tmp_path):
    g = GridMap((0, 0, 1, 2), 1.0, np.array([[1.0], [2.0]]), np.ones((2, 1), bool))
    g.write(tmp_path / "g.asc")
    lines = (tmp_path / "g.asc").read_text().splitlines()
    assert lines[0] == "ncols 1" and lines[1] == "nrows 2"
    assert [float(v) for v in lines[6:]] == [2.0, 1.0]


# -- consistency ------------------------------------------------------------------

def test_perfect_map_scores_zero():
    m = flat_model(-40.0)
    m.mu[:] = 0.0
    # a model whose posterior mean is zero everywhere predicts exactly the offset
    ref = grid_points(lambda xy: np.full(len(xy), -40.0))
    grid, rmse = consistency_error(ref, m)
    assert rmse <= 1e-6
    assert grid.mask.sum() == 100


def test_prior_map_error_is_depth_difference():
    m = flat_model(0.0)
    ref = grid_points(lambda xy: np.full(len(xy), -7.5))
    grid, rmse = consistency_error(ref, m)
    assert rmse == pytest.approx(7.5, abs=1e-12)
    np.testing.assert_allclose(grid.values[grid.mask], 7.5)


def test_error_averages_soundings_within_cell():
    m = flat_model(0.0)
    ref = np.array([[0.2, 0.2, -1.0], [0.8, 0.8, -3.0], [1.5, 0.5, 4.0]])
    grid, rmse = consistency_error(ref, m, bounds=(0, 0, 2, 1))
    np.testing.assert_allclose(grid.values[0], [2.0, 4.0])
    assert rmse == pytest.approx(np.sqrt((4 + 16) / 2))


def test_empty_cells_masked():
    ref = np.array([[0.5, 0.5, -1.0], [3.5, 0.5, -1.0]])
    grid, _ = consistency_error(ref, flat_model(0.0), bounds=(0, 0, 4, 1))
    np.testing.assert_array_equal(grid.mask, [[True, False, False, True]])


def test_no_soundings_raise():
    with pytest.raises(ValueError):
        consistency_error(np.empty((0, 3)), flat_model())
    with pytest.raises(ValueError):
        consistency_error([[50.0, 50.0, 1.0]], flat_model(), bounds=(0, 0, 1, 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_consistency_invariant_to_sounding_order(seed):
    rng = np.random.default_rng(seed)
    ref = np.column_stack([rng.uniform(0, 6, size=(80, 2)), rng.normal(-20, 2, size=80)])
    m = flat_model(-20.0)
    m.mu = rng.normal(size=16)
    a = consistency_error(ref, m, bounds=(0, 0, 6, 6))
    b = consistency_error(ref[rng.permutation(80)], m, bounds=(0, 0, 6, 6))
    assert abs(a[1] - b[1]) <= 1e-9
    np.testing.assert_allclose(a[0].values, b[0].values, atol=1e-9)


# -- trajectories -----------------------------------------------------------------

def make_traj(times, xy):
    xy = np.asarray(xy, dtype=float)
    return Trajectory(np.asarray(times, dtype=float),
                      np.column_stack([xy, np.full(len(xy), -5.0), np.zeros(len(xy))]))


def test_identical_trajectories_have_zero_error():
    t = make_traj([0, 1, 2], [[0, 0], [1, 0], [2, 0]])
    err = trajectory_error(t, t)
    assert err.rmse == 0.0 and err.terminal == 0.0


def test_constant_offset():
    truth = make_traj([0, 1, 2], [[0, 0], [1, 0], [2, 0]])
    est = make_traj([0, 1, 2], [[0, 3], [1, 3], [2, 3]])
    err = trajectory_error(est, truth)
    np.testing.assert_array_equal(err.errors, 3.0)
    assert err.rmse == 3.0


def test_depth_and_heading_are_ignored():
    truth = make_traj([0, 1], [[0, 0], [1, 0]])
    est = Trajectory(truth.times, truth.states + [0, 0, 7.0, 1.0])
    assert trajectory_error(est, truth).rmse == 0.0


def test_truth_is_held_between_samples():
    truth = make_traj([0, 2], [[0, 0], [10, 0]])
    est = make_traj([1.5], [[0, 0]])
    assert trajectory_error(est, truth).errors[0] == 0.0


def test_disjoint_ranges_raise():
    a = make_traj([0, 1], [[0, 0], [1, 0]])
    b = make_traj([5, 6], [[0, 0], [1, 0]])
    with pytest.raises(ValueError):
        trajectory_error(a, b)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.booleans())
def test_error_zero_iff_equal(seed, equal):
    rng = np.random.default_rng(seed)
    xy = rng.normal(size=(20, 2))
    truth = make_traj(np.arange(20), xy)
    other = xy.copy()
    if not equal:
        other[rng.integers(20)] += rng.normal(size=2) + 0.1
    err = trajectory_error(make_traj(np.arange(20), other), truth)
    assert (err.rmse == 0.0) == equal


# -- map export -------------------------------------------------------------------

def test_prior_export():
    m = flat_model(0.0)
    mean, var, Z = export_map_grid(m, (0, 0, 4, 3), 1.0)
    assert mean.shape == (3, 4)
    np.testing.assert_allclose(mean.values, 0.0, atol=1e-12)
    np.testing.assert_allclose(var.values, m.kernel.variance, rtol=1e-5)
    np.testing.assert_array_equal(Z, m.Z)


def test_single_cell_matches_posterior():
    m = flat_model(-3.0)
    m.mu = np.random.default_rng(1).normal(size=16)
    mean, var, _ = export_map_grid(m, (2, 2, 3, 3), 1.0)
    p = posterior(m, [[2.5, 2.5]])
    assert mean.values[0, 0] == pytest.approx(p.mean[0] - 3.0, abs=1e-12)
    assert var.values[0, 0] == pytest.approx(p.variance[0], abs=1e-12)


def test_batched_export_equals_pointwise():
    m = flat_model()
    m.mu = np.random.default_rng(2).normal(size=16)
    a = export_map_grid(m, (0, 0, 10, 10), 0.5, batch=7)
    b = export_map_grid(m, (0, 0, 10, 10), 0.5, batch=100000)
    np.testing.assert_allclose(a[0].values, b[0].values, atol=1e-10)
    np.testing.assert_allclose(a[1].values, b[1].values, atol=1e-10)


def test_trained_variance_lower_inside_coverage():
    rng = np.random.default_rng(3)
    Z = rng.uniform(0, 20, size=(25, 2))
    m = new_model(Z, KernelParams.from_values(1.0, 4.0, 0.05))
    X = rng.uniform(0, 10, size=(400, 2))
    y = np.sin(X[:, 0] / 3.0)
    for _ in range(300):
        optimizer_step(m, X, y, len(X), 0.05)
    _, var, _ = export_map_grid(m, (0, 0, 20, 20), 1.0)
    inside = var.values[:10, :10].mean()
    outside = var.values[12:, 12:].mean()
    assert inside < outside


# -- throughput and tables ----------------------------------------------------

def test_throughput_single_particle():
    rep = throughput_report([1000], seconds=2.0)
    assert rep["average"] == 1000 and rep["total"] == 1000 and rep["rate"] == 500.0


def test_throughput_reads_models():
    m = flat_model(0.0, S=4)
    X = np.random.default_rng(0).uniform(0, 10, size=(10, 2))
    for _ in range(3):
        optimizer_step(m, X, np.zeros(10), 10, 0.01)
    assert throughput_report([m, m])["per_particle"].tolist() == [3, 3]


def test_table_round_trip(tmp_path):
    write_table(tmp_path / "t.csv", ["a", "b", "c"], [(1, 0.1, True), (2, 1e-300, "x")])
    header, rows = read_table(tmp_path / "t.csv")
    assert header == ["a", "b", "c"]
    assert rows == [[1, 0.1, True], [2, 1e-300, "x"]]


def test_report_files(tmp_path):
    g = GridMap((0, 0, 1, 1), 1.0, [[0.5]], [[True]])
    err = TrajectoryError(np.array([0.0, 1.0]), np.array([0.0, 2.0]), 2 ** 0.5, 2.0)
    rep = RunReport([0.5], [g], np.array([10]), [[(1, -3.0)]], [1.0], err, err,
                    [(1.0, 2.0, 1.0)], [True])
    rep.write(tmp_path)
    header, rows = read_table(tmp_path / "report.csv")
    values = dict(rows)
    assert values["map_rmse_mean"] == 0.5 and values["resample_events"] == 1
    assert values["all_converged"] is True
    for name in ["iterations.csv", "elbo.csv", "consistency_000.asc",
                 "trajectory_error.csv", "resample_errors.csv"]:
        assert (tmp_path / name).exists()
