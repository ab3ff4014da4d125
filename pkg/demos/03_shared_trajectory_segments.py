"""
Trajectory histories that share their past
==========================================

After every resampling, surviving particles seal their open trajectory
segment and their offspring point at it instead of copying it.  Memory
then grows with the number of resamples times the number of particles,
not with the history length times the number of particles.  This script
compares the stored pose count with the naive full-copy scheme.
"""

import numpy as np

from svgpslam import ControlInput, Pose, make_particle_set, pose_at, predict, resample

rng = np.random.default_rng(1)
J = 32
pset = make_particle_set(J, Pose(0.0, [0, 0, -10], 0.0), motion_noise=(0.05, 0.05, 0, 1e-4))

steps, every = 2000, 100
for k in range(1, steps + 1):
    predict(pset, ControlInput(float(k), surge=1.0, yaw_rate=0.002), 1.0)
    if k % every == 0:
        pset.log_weights = np.log(rng.dirichlet(np.full(J, 0.5)))
        resample(pset, rng)

unique = {id(seg): seg for p in pset for seg in p.history.handles}
stored = sum(len(s) for s in unique.values()) + sum(len(p.history.tail) for p in pset)
print(f"{J} particles, {steps + 1} poses each, {len(pset.index)} resamples")
print(f"full copies would store {J * (steps + 1)} poses; shared segments store {stored}")

# %%
# Looking up a past pose walks the shared index, so any particle can
# answer "where was I at time t" for the minibatch builder.
p = pset[0]
print("particle 0 at t=500:", np.round(pose_at(p.history, pset.index, 500.0).position, 2))
