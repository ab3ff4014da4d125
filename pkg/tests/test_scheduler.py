import numpy as np
import pytest

from svgpslam.core import BeamLog, Ping, Pose
from svgpslam.filter import make_particle_set
from svgpslam.scheduler import TrainerPool
from svgpslam.svgp import KernelParams, new_model


def setup(J=4, B=2, seed=0):
    rng = np.random.default_rng(seed)
    pose = Pose(0.0, [0.0, 0.0, -5.0], 0.0)
    pset = make_particle_set(J, pose, groups=B, seed=seed, meas_noise=0.5,
                             beams_per_weight=8)
    Z = rng.uniform(-10, 10, size=(9, 2))
    for p in pset:
        p.map = new_model(Z, KernelParams.from_values(1.0, 5.0, 0.1),
                          rng=np.random.default_rng(1), depth_offset=-20.0)
    log = BeamLog()
    beams = np.column_stack([np.zeros(20), np.linspace(-10, 10, 20),
                             -15.0 + rng.normal(0, 0.1, 20)])
    log.append_ping(Ping(0.0, beams))
    return pset, log, Ping(0.0, beams)


def test_round_robin_fairness():
    pset, log, _ = setup(J=6, B=2)
    with TrainerPool(2) as pool:
        for _ in range(7):
            pool.train(pset, log, budget=5, minibatch=10, lr=0.05)
    counts = [p.map.iterations for p in pset]
    assert sum(counts) == 70
    for g in range(2):
        members = pset.group_members(g)
        c = [counts[j] for j in members]
        assert max(c) - min(c) <= 1
    assert [s.iterations for s in pool.stats] == [35, 35]


def test_minibatch_clamped_to_log():
    pset, log, _ = setup()
    with TrainerPool(2) as pool:
        assert pool.train(pset, log, budget=3, minibatch=500, lr=0.05) == 6


def test_empty_log_trains_nothing():
    pset, _, _ = setup()
    with TrainerPool(2) as pool:
        assert pool.train(pset, BeamLog(), budget=3, minibatch=5, lr=0.05) == 0


def test_bad_pool_arguments():
    with pytest.raises(ValueError):
        TrainerPool(2, backend="gpu")
    with pytest.raises(ValueError):
        TrainerPool(0)


@pytest.mark.parametrize("backend", ["thread", "process"])
def test_backends_match_inline(backend):
    results = {}
    for name in ["inline", backend]:
        pset, log, ping = setup(J=4, B=2, seed=3)
        with TrainerPool(2, backend=name) as pool:
            for _ in range(4):
                pool.train(pset, log, budget=6, minibatch=12, lr=0.05)
            ll = pool.loglik(pset, ping)
        results[name] = ([p.map.pack() for p in pset], ll)
    for a, b in zip(results["inline"][0], results[backend][0]):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(results["inline"][1], results[backend][1])
