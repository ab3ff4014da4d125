"""Trainer groups: ``B`` contexts, each owning ``J / B`` particle maps.

Between filter barriers (prediction, weighting, resampling) every group
spends a per-ping iteration budget on its particles in round-robin order.
Minibatches are assembled by the coordinator, which owns the beam log and
the histories; the optimiser steps run inside the group's context.

Backends:

``inline``
    groups run one after another in the calling thread;
``thread``
    one thread per group;
``process``
    one worker process per group.  Maps travel to the worker with their
    minibatches and come back after the block, so at any moment exactly one
    context owns a map.

The numerical result does not depend on the backend: each particle's
minibatches come from its own random stream and its steps are applied in
the same order.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .filter import build_minibatch, ping_log_likelihood, train_step, weight_beams
from . import svgp

BACKENDS = ("inline", "thread", "process")


def _limit_blas_threads():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return
    threadpool_limits(1)


def _train_group(models, jobs, n_total, lr, window, threshold):
    t0 = time.perf_counter()
    for j, X, y in jobs:
        train_step(models[j], X, y, n_total, lr, window, threshold)
    return models, time.perf_counter() - t0


def _loglik_group(models, states, ping, meas_noise, beams):
    out = {}
    for j, model in models.items():
        try:
            out[j] = ping_log_likelihood(model, states[j], ping, meas_noise, beams)
        except (svgp.NumericalError, np.linalg.LinAlgError):
            out[j] = float("nan")
    return out


@dataclass
class GroupStats:
    iterations: int = 0
    seconds: float = 0.0


@dataclass
class TrainerPool:
    groups: int
    backend: str = "inline"
    cursors: list = field(init=False)
    stats: list = field(init=False)
    wall: float = field(init=False)

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")
        if self.groups < 1:
            raise ValueError("need at least one trainer group")
        self.cursors = [0] * self.groups
        self.stats = [GroupStats() for _ in range(self.groups)]
        self.wall = 0.0
        self._executor = None
        if self.backend == "thread" and self.groups > 1:
            self._executor = ThreadPoolExecutor(self.groups)
        elif self.backend == "process" and self.groups > 1:
            self._executor = ProcessPoolExecutor(self.groups, initializer=_limit_blas_threads)

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _schedule(self, pset, g, budget):
        members = pset.group_members(g)
        b = len(members)
        order = [members[(self.cursors[g] + i) % b] for i in range(budget)]
        self.cursors[g] = (self.cursors[g] + budget) % b
        return order

    def _run(self, fn, per_group):
        """Run ``fn(*args)`` for each group; returns results in group order."""
        if self._executor is None:
            return [fn(*args) for args in per_group]
        futures = [self._executor.submit(fn, *args) for args in per_group]
        return [f.result() for f in futures]

    def train(self, pset, beam_log, budget, minibatch, lr,
              window=svgp.DEFAULT_WINDOW, threshold=svgp.DEFAULT_THRESHOLD):
        """Spend ``budget`` optimiser steps in every group."""
        if budget <= 0 or len(beam_log) == 0:
            return 0
        n_total = len(beam_log)
        # the log may still hold fewer beams than a minibatch
        minibatch = min(minibatch, n_total)
        args = []
        for g in range(self.groups):
            jobs = []
            for j in self._schedule(pset, g, budget):
                X, y = build_minibatch(pset[j], beam_log, pset.index, minibatch)
                jobs.append((j, X, y))
            models = {j: pset[j].map for j in pset.group_members(g)}
            args.append((models, jobs, n_total, lr, window, threshold))
        t0 = time.perf_counter()
        results = self._run(_train_group, args)
        self.wall += time.perf_counter() - t0
        for g, (models, seconds) in enumerate(results):
            for j, model in models.items():
                pset[j].map = model
            self.stats[g].iterations += budget
            self.stats[g].seconds += seconds
        return budget * self.groups

    def loglik(self, pset, ping):
        """Per-particle ping log-likelihoods, evaluated in the owning groups."""
        beams = weight_beams(ping, pset.beams_per_weight)
        args = []
        for g in range(self.groups):
            members = pset.group_members(g)
            args.append(({j: pset[j].map for j in members},
                         {j: pset[j].state for j in members},
                         ping, pset.meas_noise, beams))
        out = np.empty(len(pset))
        for res in self._run(_loglik_group, args):
            for j, v in res.items():
                out[j] = v
        return out
