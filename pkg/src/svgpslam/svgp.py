"""Stochastic variational GP regression with a Matern-1/2 kernel.

The model keeps an unwhitened Gaussian ``q(u) = N(mu, L L^T)`` over the
function values at ``S`` inducing inputs ``Z``.  ``elbo_minibatch`` returns
the minibatch ELBO estimate and its exact gradient with respect to every
trainable quantity (log kernel variance, log lengthscale, log noise
variance, ``Z``, ``mu`` and the lower triangle of ``L``).  Gradients are
derived by hand and are checked against central differences in the tests.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

JITTER = 1e-6
VAR_FLOOR = 1e-9
L_DIAG_FLOOR = 1e-8
Z_MIN_SEPARATION = 1e-6
MAX_SKIPS = 10
LOG_2PI = math.log(2.0 * math.pi)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

PARAM_GROUPS = ("kernel", "noise", "inducing", "variational")


class NumericalError(ArithmeticError):
    """Raised when the inducing covariance cannot be factorised, or when
    training keeps producing non-finite gradients."""


@dataclass
class KernelParams:
    log_variance: float
    log_lengthscale: float
    log_noise: float

    @classmethod
    def from_values(cls, variance, lengthscale, noise):
        if min(variance, lengthscale, noise) <= 0:
            raise ValueError("kernel parameters must be strictly positive")
        return cls(math.log(variance), math.log(lengthscale), math.log(noise))

    @property
    def variance(self):
        return math.exp(self.log_variance)

    @property
    def lengthscale(self):
        return math.exp(self.log_lengthscale)

    @property
    def noise(self):
        return math.exp(self.log_noise)


def kernel_matern12(a, b, k):
    """sigma^2 * exp(-|a - b| / lengthscale) for two 2-vectors."""
    r = math.hypot(a[0] - b[0], a[1] - b[1])
    return k.variance * math.exp(-r / k.lengthscale)


def _pair_distances(A, B):
    dx = A[:, 0, None] - B[None, :, 0]
    dy = A[:, 1, None] - B[None, :, 1]
    return np.sqrt(dx * dx + dy * dy)


def matern12(A, B, k):
    """Kernel matrix between row sets ``A`` (n, 2) and ``B`` (m, 2)."""
    return k.variance * np.exp(-_pair_distances(A, B) / k.lengthscale)


def init_inducing_uniform(bounds, count, rng):
    """Jittered regular grid of ``count`` inducing inputs over ``bounds``.

    ``bounds`` is ``(xmin, ymin, xmax, ymax)``.  The rectangle is split into
    a ceil(sqrt(S)) square grid of cells and cells are filled row by row,
    one uniformly jittered point per cell.
    """
    xmin, ymin, xmax, ymax = map(float, bounds)
    if not (xmax > xmin and ymax > ymin):
        raise ValueError(f"degenerate bounds {bounds}")
    if count < 1:
        raise ValueError("inducing count must be >= 1")
    g = math.ceil(math.sqrt(count))
    cells = np.arange(count)
    ix, iy = cells % g, cells // g
    w, h = (xmax - xmin) / g, (ymax - ymin) / g
    jitter = rng.uniform(0.0, 1.0, size=(count, 2))
    Z = np.column_stack([xmin + (ix + jitter[:, 0]) * w, ymin + (iy + jitter[:, 1]) * h])
    return _separate(Z, rng)


def _separate(Z, rng, eps=Z_MIN_SEPARATION):
    """Jitter rows closer than ``eps`` to another row."""
    if len(Z) < 2:
        return Z
    for _ in range(100):
        close = _pair_distances(Z, Z) < eps
        np.fill_diagonal(close, False)
        if not close.any():
            return Z
        idx = np.unique(np.nonzero(np.triu(close))[1])
        Z = Z.copy()
        Z[idx] += rng.uniform(-10 * eps, 10 * eps, size=(len(idx), 2))
    raise NumericalError("could not separate duplicated inducing inputs")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size), 0)


@dataclass
class SvgpModel:
    """All state of one SVGP map, including its optimiser.

    ``elbo_trace`` holds ``(iteration, elbo)`` pairs; ``converged`` is the
    sticky flag raised by :func:`convergence_check`.
    """

    kernel: KernelParams
    Z: np.ndarray
    mu: np.ndarray
    L: np.ndarray
    adam: AdamState
    elbo_trace: list = field(default_factory=list)
    converged: bool = False
    ema: list = field(default_factory=list)
    ema_window: int = 50
    trainable: tuple = PARAM_GROUPS
    skipped: int = 0
    consecutive_skips: int = 0
    depth_offset: float = 0.0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @property
    def num_inducing(self):
        return len(self.Z)

    @property
    def iterations(self):
        return self.adam.step

    @property
    def Sigma(self):
        return self.L @ self.L.T

    def copy(self):
        return copy.deepcopy(self)

    # -- flat parameter vector, in the order the optimiser sees it ----------
    def pack(self):
        S = len(self.Z)
        il = np.tril_indices(S)
        return np.concatenate([
            [self.kernel.log_variance, self.kernel.log_lengthscale, self.kernel.log_noise],
            self.Z.ravel(), self.mu, self.L[il]])

    def unpack(self, theta):
        S = len(self.Z)
        il = np.tril_indices(S)
        self.kernel = KernelParams(float(theta[0]), float(theta[1]), float(theta[2]))
        self.Z = theta[3:3 + 2 * S].reshape(S, 2).copy()
        self.mu = theta[3 + 2 * S:3 + 3 * S].copy()
        L = np.zeros((S, S))
        L[il] = theta[3 + 3 * S:]
        self.L = L

    def trainable_mask(self):
        S = len(self.Z)
        groups = set(self.trainable)
        unknown = groups - set(PARAM_GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        return np.concatenate([
            np.full(2, "kernel" in groups), [("noise" in groups)],
            np.full(2 * S, "inducing" in groups),
            np.full(S + S * (S + 1) // 2, "variational" in groups)]).astype(bool)


def new_model(Z, kernel, rng=None, depth_offset=0.0):
    """Model with ``q(u)`` equal to the prior, so the KL starts at zero."""
    Z = np.array(Z, dtype=float)
    Kss = _kss(Z, kernel)
    L = _cholesky(Kss, kernel)
    S = len(Z)
    rng = np.random.default_rng(0) if rng is None else rng
    n_params = 3 + 3 * S + S * (S + 1) // 2
    return SvgpModel(kernel=kernel, Z=Z, mu=np.zeros(S), L=L,
                     adam=AdamState.zeros(n_params), depth_offset=depth_offset, rng=rng)


def default_kernel(bounds, first_depths):
    """Scale-aware hyperparameters for a new survey area.

    Lengthscale is 1/20 of the area diagonal, signal variance the variance
    of the first ping's depths (at least 1 m^2), noise variance 0.1 m^2.
    """
    xmin, ymin, xmax, ymax = bounds
    diag = math.hypot(xmax - xmin, ymax - ymin)
    var = max(float(np.var(first_depths)), 1.0)
    return KernelParams.from_values(var, diag / 20.0, 0.1)


def _kss(Z, k):
    K = matern12(Z, Z, k)
    K[np.diag_indices_from(K)] += JITTER * k.variance
    return K


def _cholesky(K, k):
    try:
        return sla.cholesky(K, lower=True, check_finite=False)
    except (sla.LinAlgError, ValueError):
        with np.errstate(all="ignore"):
            try:
                cond = float(np.linalg.cond(K))
            except np.linalg.LinAlgError:
                cond = float("inf")
        raise NumericalError(
            f"inducing covariance is not positive definite after jitter "
            f"(condition ~{cond:.3g}, lengthscale {k.lengthscale:.4g}, "
            f"variance {k.variance:.4g})") from None


def kl_divergence(model):
    """KL[q(u) || p(u)] for the model's current parameters."""
    k = model.kernel
    Kss = _kss(model.Z, k)
    Lk = _cholesky(Kss, k)
    return _kl(Lk, model.mu, model.L)


def _kl(Lk, mu, L):
    S = len(mu)
    alpha = sla.solve_triangular(Lk, mu, lower=True, check_finite=False)
    B = sla.solve_triangular(Lk, L, lower=True, check_finite=False)
    logdet_k = 2.0 * np.sum(np.log(np.diag(Lk)))
    logdet_q = 2.0 * np.sum(np.log(np.abs(np.diag(L))))
    return 0.5 * (np.sum(B * B) + alpha @ alpha - S + logdet_k - logdet_q)


def _predict_terms(model, X):
    k = model.kernel
    Kss = _kss(model.Z, k)
    Lk = _cholesky(Kss, k)
    Kis = matern12(X, model.Z, k)
    V = sla.solve_triangular(Lk, Kis.T, lower=True, check_finite=False)
    At = sla.solve_triangular(Lk.T, V, lower=False, check_finite=False)
    return Kss, Lk, Kis, V, At.T


def elbo_minibatch(model, X, y, n_total, *, grad=True):
    """Minibatch ELBO estimate ``(N/M) sum E_q[ln p(y_i|f_i)] - KL``.

    ``X`` is ``(M, 2)``, ``y`` ``(M,)`` de-meaned depths, ``n_total`` the
    dataset size N.  Returns ``(elbo, grad_vector)`` where the gradient is
    laid out like :meth:`SvgpModel.pack`; with ``grad=False`` only the
    value is returned.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    M = len(y)
    if M < 1 or n_total < M:
        raise ValueError(f"need 1 <= M <= N, got M={M}, N={n_total}")
    k = model.kernel
    sig2, ell, sn2 = k.variance, k.lengthscale, k.noise
    Z, mu, Lq = model.Z, model.mu, model.L
    S = len(Z)

    Rss = _pair_distances(Z, Z)
    Kss0 = sig2 * np.exp(-Rss / ell)
    Kss = Kss0.copy()
    Kss[np.diag_indices(S)] += JITTER * sig2
    Lk = _cholesky(Kss, k)
    Kinv = _chol_inverse(Lk)
    Ris = _pair_distances(X, Z)
    Kis = sig2 * np.exp(-Ris / ell)

    A = Kis @ Kinv
    m = A @ mu
    AL = A @ Lq
    v = sig2 - np.einsum("ij,ij->i", A, Kis) + np.einsum("ij,ij->i", AL, AL)
    r = y - m
    scale = n_total / M
    ell_terms = -0.5 * (LOG_2PI + math.log(sn2)) - (r * r + v) / (2.0 * sn2)

    KinvL = Kinv @ Lq
    alpha = Kinv @ mu
    diagL = np.diag(Lq)
    logdet_k = 2.0 * np.sum(np.log(np.diag(Lk)))
    logdet_q = 2.0 * np.sum(np.log(np.abs(diagL)))
    kl = 0.5 * (np.sum(KinvL * Lq) + mu @ alpha - S + logdet_k - logdet_q)
    elbo = scale * np.sum(ell_terms) - kl
    if not grad:
        return float(elbo)

    # d/dm_i and d/dv_i of the data term
    g_m = scale * r / sn2
    g_v = -scale / (2.0 * sn2)

    G = A.T @ A
    C = Lq @ KinvL.T                       # Sigma Kss^-1
    Atg = A.T @ g_m
    g_mu = Atg - alpha
    g_L = 2.0 * g_v * (G @ Lq) - KinvL
    g_L[np.diag_indices(S)] += 1.0 / diagL

    g_lognoise = scale * np.sum(-0.5 + (r * r + v) / (2.0 * sn2))
    il = np.tril_indices(S)
    if not {"kernel", "inducing"} & set(model.trainable):
        # the S^3 cotangent products below only feed frozen parameters
        g = np.concatenate([[0.0, 0.0, g_lognoise], np.zeros(2 * S), g_mu, g_L[il]])
        return float(elbo), g

    # cotangents of the kernel matrices (Kss one symmetrised)
    Kis_bar = np.outer(g_m, alpha) + 2.0 * g_v * (A @ C - A)
    Kss_bar = -np.outer(Atg, alpha) + g_v * G - 2.0 * g_v * (G @ C)
    Kss_bar = 0.5 * (Kss_bar + Kss_bar.T)
    Kss_bar += 0.5 * (KinvL @ KinvL.T + np.outer(alpha, alpha) - Kinv)

    Wis = Kis_bar * Kis
    Wss = Kss_bar * Kss0
    g_logvar = np.sum(Kss_bar * Kss) + np.sum(Wis) + g_v * M * sig2
    g_logell = (np.sum(Wss * Rss) + np.sum(Wis * Ris)) / ell

    # Matern-1/2 is not differentiable at r = 0; those entries contribute 0
    Wis /= np.where(Ris > 0.0, Ris, np.inf)
    Gss = 2.0 * Wss / np.where(Rss > 0.0, Rss, np.inf)
    g_Z = (Wis.T @ X - Wis.sum(axis=0)[:, None] * Z
           + Gss @ Z - Gss.sum(axis=1)[:, None] * Z) / ell
    g = np.concatenate([[g_logvar, g_logell, g_lognoise], g_Z.ravel(), g_mu, g_L[il]])
    return float(elbo), g


def _chol_inverse(Lk):
    inv, info = sla.lapack.dpotri(Lk, lower=1)
    if info != 0:
        raise NumericalError(f"dpotri failed with info={info}")
    return np.tril(inv) + np.tril(inv, -1).T


def full_elbo(model, X, y):
    """Full-batch ELBO over the whole dataset."""
    return elbo_minibatch(model, X, y, len(y), grad=False)


def optimizer_step(model, X, y, n_total, lr):
    """One Adam ascent step on the minibatch ELBO; mutates and returns ``model``.

    A step whose gradient is non-finite is skipped and counted; the tenth
    consecutive skip raises :class:`NumericalError`.
    """
    try:
        elbo, g = elbo_minibatch(model, X, y, n_total)
        ok = np.isfinite(elbo) and np.all(np.isfinite(g))
    except NumericalError:
        ok = False
    if not ok:
        model.skipped += 1
        model.consecutive_skips += 1
        if model.consecutive_skips >= MAX_SKIPS:
            raise NumericalError(
                f"{model.consecutive_skips} consecutive optimiser steps skipped "
                f"(lengthscale {model.kernel.lengthscale:.4g})")
        return model
    model.consecutive_skips = 0
    return adam_update(model, elbo, g, lr)


def adam_update(model, elbo, g, lr):
    """Apply one Adam ascent update with gradient ``g`` and log ``elbo``."""
    mask = model.trainable_mask()
    g = np.where(mask, g, 0.0)
    st = model.adam
    st.step += 1
    st.m = ADAM_BETA1 * st.m + (1.0 - ADAM_BETA1) * g
    st.v = ADAM_BETA2 * st.v + (1.0 - ADAM_BETA2) * g * g
    if lr != 0.0:
        mhat = st.m / (1.0 - ADAM_BETA1 ** st.step)
        vhat = st.v / (1.0 - ADAM_BETA2 ** st.step)
        theta = model.pack() + lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
        model.unpack(theta)
        _enforce_invariants(model)
    model.elbo_trace.append((st.step, elbo))
    _update_ema(model)
    return model


def _enforce_invariants(model):
    d = np.diag(model.L)
    if np.any(d < L_DIAG_FLOOR):
        model.L[np.diag_indices_from(model.L)] = np.maximum(d, L_DIAG_FLOOR)
    if "inducing" in model.trainable:
        model.Z = _separate(model.Z, model.rng)


def posterior(model, Xq):
    """Marginal posterior of the latent depth at query points ``(Q, 2)``.

    Observation noise is not included.  Returns ``(mean, variance)`` in the
    de-meaned depth frame of the model.
    """
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    if len(Xq) < 1:
        raise ValueError("need at least one query point")
    mean, var = _posterior_raw(model, Xq)
    return PosteriorPrediction(mean, np.maximum(var, VAR_FLOOR))


def _posterior_raw(model, Xq):
    _, _, _, V, A = _predict_terms(model, Xq)
    AL = A @ model.L
    var = (model.kernel.variance - np.einsum("ij,ij->j", V, V)
           + np.einsum("ij,ij->i", AL, AL))
    return A @ model.mu, var


@dataclass(frozen=True)
class PosteriorPrediction:
    mean: np.ndarray
    variance: np.ndarray


# -- convergence -----------------------------------------------------------

DEFAULT_WINDOW = 50
DEFAULT_THRESHOLD = 1e-3


def _update_ema(model):
    alpha = 2.0 / (model.ema_window + 1.0)
    x = model.elbo_trace[-1][1]
    prev = model.ema[-1] if model.ema else x
    model.ema.append(prev + alpha * (x - prev))


def ema_series(trace, window):
    """Exponential moving average of an ELBO trace (smoothing 2/(W+1))."""
    alpha = 2.0 / (window + 1.0)
    out = np.empty(len(trace))
    acc = None
    for i, (_, x) in enumerate(trace):
        acc = x if acc is None else acc + alpha * (x - acc)
        out[i] = acc
    return out


def convergence_check(model, window=DEFAULT_WINDOW, threshold=DEFAULT_THRESHOLD):
    """Raise (and keep) ``model.converged`` once the ELBO EMA has flattened.

    Converged means the relative change of the EMA over the last ``window``
    steps is below ``threshold``.  Training is never stopped by this; the
    flag only gates loop-closure prompting.
    """
    if model.converged:
        return True
    if len(model.elbo_trace) < 2 * window:
        return False
    if len(model.ema) != len(model.elbo_trace) or window != model.ema_window:
        ema = ema_series(model.elbo_trace, window)
    else:
        ema = model.ema
    now, before = ema[-1], ema[-1 - window]
    if abs(now - before) / (abs(now) + 1e-9) < threshold:
        model.converged = True
    return model.converged


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(model, path):
    """Write the full model state to an ``.npz`` container."""
    meta = {
        "kernel": [model.kernel.log_variance, model.kernel.log_lengthscale,
                   model.kernel.log_noise],
        "step": model.adam.step,
        "converged": model.converged,
        "trainable": list(model.trainable),
        "skipped": model.skipped,
        "consecutive_skips": model.consecutive_skips,
        "depth_offset": model.depth_offset,
        "rng": model.rng.bit_generator.state,
        "ema_window": model.ema_window,
    }
    trace = np.array(model.elbo_trace, dtype=float).reshape(-1, 2)
    with open(path, "wb") as fh:
        np.savez(fh, Z=model.Z, mu=model.mu, L=model.L, adam_m=model.adam.m,
                 adam_v=model.adam.v, elbo_trace=trace, ema=np.asarray(model.ema, float),
                 meta=np.array(json.dumps(meta)))


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as f:
        meta = json.loads(str(f["meta"]))
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        model = SvgpModel(
            kernel=KernelParams(*meta["kernel"]), Z=f["Z"].copy(), mu=f["mu"].copy(),
            L=f["L"].copy(),
            adam=AdamState(f["adam_m"].copy(), f["adam_v"].copy(), int(meta["step"])),
            elbo_trace=[(int(i), float(e)) for i, e in f["elbo_trace"]],
            converged=bool(meta["converged"]), ema=[float(x) for x in f["ema"]],
            trainable=tuple(meta["trainable"]), skipped=int(meta["skipped"]),
            consecutive_skips=int(meta["consecutive_skips"]),
            depth_offset=float(meta["depth_offset"]), rng=rng,
            ema_window=int(meta["ema_window"]))
    return model
