import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svgpslam.core import (BeamLog, ControlInput, EmptyDatasetError, OrderingError, Ping,
                           Pose, append_ping, sample_uniform, transform_beam,
                           transform_beams, wrap_angle)


def ping(t, n, offset=0.0):
    return Ping(t, np.arange(3 * n, dtype=float).reshape(n, 3) + offset)


def test_pose_heading_normalised():
    assert Pose(0.0, [0, 0, 0], 3 * math.pi).heading == pytest.approx(math.pi)
    assert Pose(0.0, [0, 0, 0], -math.pi).heading == pytest.approx(math.pi)
    assert Pose(0.0, [0, 0, 0], 0.5).heading == 0.5


@pytest.mark.parametrize("t", [-1.0, float("nan"), float("inf")])
def test_pose_rejects_bad_time(t):
    with pytest.raises(ValueError):
        Pose(t, [0, 0, 0], 0.0)


def test_pose_state_round_trip():
    p = Pose(2.0, [1.0, 2.0, -3.0], 0.25)
    q = Pose.from_state(2.0, p.state)
    assert p == q


def test_wrap_angle_range():
    a = np.linspace(-20, 20, 2001)
    w = wrap_angle(a)
    assert np.all(w > -math.pi) and np.all(w <= math.pi)
    np.testing.assert_allclose(np.sin(w), np.sin(a), atol=1e-12)
    np.testing.assert_allclose(np.cos(w), np.cos(a), atol=1e-12)


def test_control_input_finite():
    with pytest.raises(ValueError):
        ControlInput(0.0, float("nan"), 0.0)


def test_ping_validation():
    with pytest.raises(ValueError):
        Ping(0.0, np.zeros((0, 3)))
    with pytest.raises(ValueError):
        Ping(0.0, np.zeros((Ping.MAX_BEAMS + 1, 3)))
    with pytest.raises(ValueError):
        Ping(0.0, np.zeros((2, 2)))
    p = ping(0.0, 4)
    with pytest.raises(ValueError):
        p.beams[0, 0] = 1.0


def test_append_ping_counts():
    log = BeamLog()
    append_ping(log, ping(0.0, 3))
    assert log.n_records == 3
    log = BeamLog()
    log.append_ping(ping(0.0, 5))
    log.append_ping(ping(1.0, 2))
    assert log.n_records == 7
    assert log.ping_range(1) == (5, 7)
    _, _, pidx = log.records()
    np.testing.assert_array_equal(pidx, [0] * 5 + [1] * 2)


def test_append_ping_rejects_out_of_order():
    log = BeamLog()
    log.append_ping(ping(5.0, 2))
    with pytest.raises(OrderingError):
        log.append_ping(ping(4.0, 2))
    assert log.n_records == 2


def test_append_equal_time_allowed():
    log = BeamLog()
    log.append_ping(ping(1.0, 1))
    log.append_ping(ping(1.0, 1))
    assert log.n_pings == 2


def test_log_grows_and_keeps_records():
    log = BeamLog(capacity=4)
    for i in range(50):
        log.append_ping(ping(float(i), 7, offset=i))
    beams, times, _ = log.records()
    assert len(beams) == 350
    np.testing.assert_array_equal(beams[7 * 10:7 * 11], ping(10.0, 7, offset=10).beams)
    assert log.time_range(10.0, 12.0) == (70, 91)


def test_sample_uniform_single_record():
    log = BeamLog()
    log.append_ping(Ping(2.0, [[1.0, 2.0, 3.0]]))
    beams, times = sample_uniform(log, 4, np.random.default_rng(0))
    np.testing.assert_array_equal(beams, np.tile([1.0, 2.0, 3.0], (4, 1)))
    np.testing.assert_array_equal(times, [2.0] * 4)


def test_sample_uniform_deterministic():
    log = BeamLog()
    for i in range(100):
        log.append_ping(ping(float(i), 100, offset=i))
    a = log.sample_uniform(1000, np.random.default_rng(42))
    b = log.sample_uniform(1000, np.random.default_rng(42))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_sample_uniform_empty():
    with pytest.raises(EmptyDatasetError):
        BeamLog().sample_uniform(1, np.random.default_rng(0))


def test_sample_uniform_frequencies():
    # 100 records, 1e6 draws: counts are Binomial(1e6, 0.01), sd = 99.5
    log = BeamLog()
    log.append_ping(Ping(0.0, np.column_stack([np.arange(100.0), np.zeros(100), np.zeros(100)])))
    beams, _ = log.sample_uniform(10 ** 6, np.random.default_rng(7))
    counts = np.bincount(beams[:, 0].astype(int), minlength=100)
    sd = math.sqrt(1e6 * 0.01 * 0.99)
    assert np.all(np.abs(counts - 1e4) < 5 * sd)


def test_readers_never_see_partial_ping():
    log = BeamLog(capacity=8)
    errors = []
    done = threading.Event()

    def reader():
        rng = np.random.default_rng(1)
        while not done.is_set():
            if len(log):
                beams, times = log.sample_uniform(64, rng)
                # every beam row carries its ping time in all three columns
                if not np.all(beams == times[:, None]):
                    errors.append(1)

    th = threading.Thread(target=reader)
    th.start()
    for i in range(2000):
        log.append_ping(Ping(float(i), np.full((13, 3), float(i))))
    done.set()
    th.join()
    assert not errors


def test_transform_beam_examples():
    np.testing.assert_array_equal(transform_beam(Pose(0, [0, 0, 0], 0.0), [1, 2, -3]),
                                  [1, 2, -3])
    np.testing.assert_allclose(transform_beam(Pose(0, [0, 0, 0], math.pi / 2), [1, 0, 0]),
                               [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(transform_beam(Pose(0, [10, 5, 0], math.pi), [2, 0, -4]),
                               [8, 5, -4], atol=1e-14)


def test_transform_beams_matches_scalar():
    rng = np.random.default_rng(3)
    states = rng.normal(size=(20, 4)) * [50, 50, 5, 3]
    beams = rng.normal(size=(20, 3)) * 20
    out = transform_beams(states, beams)
    for s, b, o in zip(states, beams, out):
        np.testing.assert_allclose(transform_beam(Pose.from_state(0.0, s), b), o, rtol=1e-14)


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.tuples(finite, finite, finite), st.floats(-10, 10),
       st.tuples(finite, finite, finite), st.tuples(finite, finite, finite))
def test_transform_is_rigid(pos, yaw, a, b):
    pose = Pose(0.0, pos, yaw)
    ta, tb = transform_beam(pose, a), transform_beam(pose, b)
    d0 = np.linalg.norm(np.subtract(a, b))
    d1 = np.linalg.norm(ta - tb)
    assert d1 == pytest.approx(d0, rel=1e-12, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=30), st.integers(1, 200),
       st.integers(0, 2 ** 32 - 1))
def test_log_counts_and_sample_range(sizes, m, seed):
    log = BeamLog(capacity=16)
    total = 0
    for i, n in enumerate(sizes):
        before = len(log)
        log.append_ping(Ping(float(i), np.full((n, 3), float(total))))
        total += n
        assert len(log) == total >= before
    beams, times = log.sample_uniform(m, np.random.default_rng(seed))
    assert beams.shape == (m, 3)
    assert np.all(times <= len(sizes) - 1)
    assert np.all(beams[:, 0] < total)
