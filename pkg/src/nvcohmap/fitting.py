"""Damped-Rabi least-squares fitting.

The model is ``N(tau) = a - c exp(-tau/T2*) sin^2(w tau / 2)`` with parameter
vector ``(a, c, w, T2*)``. :func:`fit_trace` runs a bound-projected
Levenberg-Marquardt iteration; the same vectorized core advances a whole batch
of independent traces in lock step, which is how per-pixel maps are fitted.
:func:`brute_force_fit` is an exhaustive grid search kept as an independent
check on the iterative solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import find_peaks
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_tau_trace
from .spin import mhz_to_radns, normalized_pl_model

__all__ = [
    "DEFAULT_BOUNDS",
    "FitOptions",
    "FitParams",
    "FitResult",
    "RabiFitter",
    "brute_force_fit",
    "fit_batch",
    "fit_trace",
    "initial_guess",
    "model_and_jacobian",
    "sum_squared_residual",
]

PARAM_NAMES = ("a", "c", "omega_prime", "t2_star")

DEFAULT_BOUNDS = (
    (0.5, 1.5),
    (0.0, 0.5),
    (float(mhz_to_radns(0.1)), float(mhz_to_radns(50.0))),
    (10.0, 1e5),
)


@dataclass(frozen=True)
class FitParams:
    a: float
    c: float
    omega_prime: float
    t2_star: float

    def __post_init__(self):
        if self.c < 0 or self.omega_prime < 0 or not self.t2_star > 0:
            raise ValueError(f"invalid fit parameters {self}")

    def to_array(self) -> np.ndarray:
        return np.array([self.a, self.c, self.omega_prime, self.t2_star], dtype=float)

    @classmethod
    def from_array(cls, p):
        return cls(*(float(v) for v in p))


@dataclass(frozen=True)
class FitOptions:
    max_iterations: int = 200
    rel_tolerance: float = 1e-10
    initial_damping: float = 1e-3
    bounds: tuple = DEFAULT_BOUNDS

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.rel_tolerance > 0 or not self.initial_damping > 0:
            raise ValueError("tolerances must be positive")
        b = np.asarray(self.bounds, dtype=float)
        if b.shape != (4, 2) or np.any(b[:, 0] >= b[:, 1]):
            raise ValueError("bounds must be four (lo, hi) pairs with lo < hi")
        if b[1, 0] < 0 or b[2, 0] < 0 or b[3, 0] <= 0:
            raise ValueError("bounds must keep c >= 0, omega' >= 0 and T2* > 0")
        object.__setattr__(self, "bounds", tuple(tuple(float(v) for v in row) for row in b))

    @property
    def lower(self):
        return np.array([lo for lo, _ in self.bounds])

    @property
    def upper(self):
        return np.array([hi for _, hi in self.bounds])


@dataclass
class FitResult:
    params: FitParams
    covariance: np.ndarray
    residual_norm: float
    r_squared: float
    iterations: int
    converged: bool
    at_bound: tuple = (False, False, False, False)
    status: str = ""

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))


def _model_jac(tau, P):
    """Batched model values (n, T) and Jacobian (n, T, 4) for parameter rows P (n, 4)."""
    a, c, w, t2 = (P[:, i : i + 1] for i in range(4))
    env = np.exp(-tau / t2)
    half = 0.5 * w * tau
    s = np.sin(half)
    s2 = s * s
    f = a - c * env * s2
    J = np.empty(f.shape + (4,))
    J[..., 0] = 1.0
    J[..., 1] = -env * s2
    # d/dw sin^2(w tau/2) = (tau/2) sin(w tau)
    J[..., 2] = -c * env * (0.5 * tau) * np.sin(2.0 * half)
    J[..., 3] = -c * s2 * env * tau / (t2 * t2)
    return f, J


def model_and_jacobian(tau_list, p):
    """Model values and the (T, 4) Jacobian with columns d/da, d/dc, d/dw, d/dT2*."""
    tau = np.asarray(tau_list, dtype=float)
    P = (p.to_array() if isinstance(p, FitParams) else np.asarray(p, dtype=float))[None, :]
    if not P[0, 3] > 0:
        raise ValueError("t2_star must be positive")
    f, J = _model_jac(tau, P)
    return f[0], J[0]


def sum_squared_residual(trace, tau_list, p) -> float:
    p = p.to_array() if isinstance(p, FitParams) else np.asarray(p, dtype=float)
    r = np.asarray(trace, dtype=float) - normalized_pl_model(tau_list, *p)
    return float(r @ r)


def _is_uniform(tau):
    d = np.diff(tau)
    return d.size > 0 and np.all(d > 0) and np.allclose(d, d[0], rtol=1e-6, atol=0)


def _spectral_frequency(y, dt):
    """Dominant nonzero frequency (cycles per unit time) of ``y`` on a uniform grid."""
    n = y.size
    n_fft = 1 << int(np.ceil(np.log2(8 * n)))
    spec = np.abs(np.fft.rfft((y - y.mean()) * np.hanning(n), n_fft))
    # ignore everything below one cycle per record; the decay envelope lives there
    k0 = max(int(np.ceil(n_fft / n)), 1)
    # the envelope's tail falls monotonically, so take the most prominent
    # interior peak rather than the global maximum
    band = spec[k0 - 1 :]
    peaks, props = find_peaks(band, prominence=0)
    if peaks.size:
        k = k0 - 1 + int(peaks[np.argmax(props["prominences"])])
    else:
        k = k0 + int(np.argmax(spec[k0:-1]))
    y0, y1, y2 = spec[k - 1], spec[k], spec[k + 1]
    denom = y0 - 2 * y1 + y2
    shift = 0.5 * (y0 - y2) / denom if denom != 0 else 0.0
    return (k + shift) / (n_fft * dt)


def _crossing_frequency(tau, y):
    s = np.sign(y - y.mean())
    s = s[s != 0]
    crossings = np.count_nonzero(s[1:] != s[:-1])
    span = tau[-1] - tau[0]
    return max(crossings, 1) / (2.0 * span)


def initial_guess(trace, tau_list, bounds=DEFAULT_BOUNDS, return_flags=False):
    """Starting point from simple statistics plus a spectral frequency estimate.

    ``a`` is the trace mean and ``c`` its peak-to-peak range; the oscillation
    frequency comes from the zero-padded DFT peak of ``a - trace`` with
    parabolic interpolation, or from zero crossings on a non-uniform grid.
    Values are clipped into ``bounds``.
    """
    tau, y = check_tau_trace(tau_list, trace, min_samples=8)
    flags = []
    a = float(y.mean())
    c = float(y.max() - y.min())
    span = float(tau[-1] - tau[0])
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    if c <= 1e-12 * max(abs(a), 1.0):
        flags.append("constant")
        c = 0.0
        freq = 2.0 / span
    elif _is_uniform(tau):
        freq = _spectral_frequency(a - y, tau[1] - tau[0])
    else:
        flags.append("nonuniform-grid")
        freq = _crossing_frequency(tau, y)
    w = 2.0 * np.pi * freq
    p = np.clip([a, c, w, 0.5 * span], lo, hi)
    params = FitParams.from_array(p)
    return (params, tuple(flags)) if return_flags else params


def _solve_steps(A, g):
    try:
        return np.linalg.solve(A, g[..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = np.empty_like(g)
        for i in range(g.shape[0]):
            out[i] = np.linalg.lstsq(A[i], g[i], rcond=None)[0]
        return out


def _r_squared(y, ssr):
    sst = np.sum((y - y.mean(axis=1, keepdims=True)) ** 2, axis=1)
    r2 = np.zeros_like(ssr)
    np.subtract(1.0, ssr / np.where(sst > 0, sst, 1.0), out=r2, where=sst > 0)
    return r2


def _linear_start(tau, Y, sw, P, lo, hi):
    """Replace (a, c) by their least-squares values for the given (w, T2*).

    The model is linear in (a, c), so this is a closed-form 2x2 solve per row;
    a row keeps its original (a, c) if the bounded solution is not cheaper.
    """
    shape = np.exp(-tau / P[:, 3:4]) * np.sin(0.5 * P[:, 2:3] * tau) ** 2
    w2 = sw * sw
    s0, s1, s2 = w2.sum(1), (w2 * shape).sum(1), (w2 * shape * shape).sum(1)
    y0, y1 = (w2 * Y).sum(1), (w2 * Y * shape).sum(1)
    det = s0 * s2 - s1 * s1
    ok = det > 1e-12 * np.maximum(s0 * s2, 1e-300)
    safe = np.where(ok, det, 1.0)
    # y ~ a - c * shape
    a = (s2 * y0 - s1 * y1) / safe
    c = (s1 * y0 - s0 * y1) / safe
    c = np.clip(c, lo[1], hi[1])
    a = np.clip((y0 + c * s1) / s0, lo[0], hi[0])
    Q = P.copy()
    Q[:, 0], Q[:, 1] = np.where(ok, a, P[:, 0]), np.where(ok, c, P[:, 1])

    def cost(M):
        r = (Y - _model_jac(tau, M)[0]) * sw
        return np.einsum("nt,nt->n", r, r)

    better = cost(Q) < cost(P)
    return np.where(better[:, None], Q, P)


def _lm(tau, Y, sw, P, opts):
    """Bound-projected Levenberg-Marquardt on a batch of rows; returns the final state."""
    n = Y.shape[0]
    lo, hi = opts.lower, opts.upper
    P = _linear_start(tau, Y, sw, P, lo, hi)
    tol = opts.rel_tolerance
    f, J = _model_jac(tau, P)
    R = (Y - f) * sw
    cost = np.einsum("nt,nt->n", R, R)
    lam = np.full(n, float(opts.initial_damping))
    nu = np.full(n, 2.0)
    iters = np.zeros(n, dtype=int)
    converged = np.zeros(n, dtype=bool)
    status = np.full(n, "iteration limit", dtype=object)
    active = np.ones(n, dtype=bool)

    for _ in range(opts.max_iterations):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        iters[idx] += 1
        Pi, Ri = P[idx], R[idx]
        Ji = J[idx] * sw[idx][..., None]
        H = np.einsum("nti,ntj->nij", Ji, Ji)
        g = np.einsum("nti,nt->ni", Ji, Ri)
        diag = np.einsum("nii->ni", H)

        # freeze parameters held at a bound by a gradient pointing outward
        frozen = ((Pi <= lo) & (g < 0)) | ((Pi >= hi) & (g > 0))
        g = np.where(frozen, 0.0, g)
        free = ~frozen
        H = H * (free[:, :, None] & free[:, None, :])

        # cosine between the residual and each Jacobian column
        scale = np.sqrt(diag * cost[idx][:, None])
        gcos = np.max(np.abs(g) / np.where(scale > 0, scale, 1.0), axis=1)
        done = (cost[idx] == 0) | (gcos < tol)

        D = np.maximum(diag, 1e-12 * diag.max(axis=1, keepdims=True))
        A = H + (lam[idx][:, None, None] * D[:, :, None]) * np.eye(4)
        A = A + frozen[:, :, None] * np.eye(4)
        step = _solve_steps(A, g)
        Pn = np.clip(Pi + step, lo, hi)
        step = Pn - Pi
        collapsed = np.all(np.abs(step) <= tol * (np.abs(Pi) + tol), axis=1)

        fn, Jn = _model_jac(tau, Pn)
        Rn = (Y[idx] - fn) * sw[idx]
        cost_n = np.einsum("nt,nt->n", Rn, Rn)
        actual = cost[idx] - cost_n
        Hs = np.einsum("nij,nj->ni", H, step)
        predicted = 2.0 * np.einsum("ni,ni->n", step, g) - np.einsum("ni,ni->n", step, Hs)
        accept = (actual > 0) & ~done

        rho = np.where(predicted > 0, actual / np.where(predicted > 0, predicted, 1.0), 0.0)
        rel = actual / np.where(cost[idx] > 0, cost[idx], 1.0)
        small_gain = accept & (rel < tol)

        acc = idx[accept]
        P[acc], R[acc], J[acc], cost[acc] = Pn[accept], Rn[accept], Jn[accept], cost_n[accept]
        lam[acc] *= np.maximum(1.0 / 3.0, 1.0 - (2.0 * rho[accept] - 1.0) ** 3)
        nu[acc] = 2.0
        rej = idx[~accept & ~done]
        lam[rej] *= nu[rej]
        nu[rej] *= 2.0

        stuck = ~accept & (collapsed | (lam[idx] > 1e16))
        stop = done | small_gain | stuck
        for mask, label in ((done, "gradient"), (small_gain, "cost reduction"), (stuck, "step size")):
            sel = idx[mask & (status[idx] == "iteration limit")]
            status[sel] = label
        converged[idx[stop]] = True
        active[idx[stop]] = False

    return P, cost, iters, converged, status


def fit_batch(tau_list, traces, guesses, opts=None, weights=None):
    """Fit many traces sharing one tau grid.

    Parameters
    ----------
    traces : (n, T) array
    guesses : (n, 4) array of starting parameters
    weights : (n, T) array or None
        Per-point least-squares weights, e.g. inverse variances.

    Returns a dict of arrays: ``params`` (n, 4), ``covariance`` (n, 4, 4),
    ``ssr``, ``r_squared``, ``iterations``, ``converged``, ``at_bound`` (n, 4)
    and ``status`` (strings).

    The linear parameters (a, c) are first set to their least-squares values
    for the starting (w, T2*). Rows then evolve independently (own damping,
    acceptance and stopping), so a row's result does not depend on which
    other rows share the batch.
    """
    opts = opts or FitOptions()
    tau = np.asarray(tau_list, dtype=float)
    Y = np.atleast_2d(np.asarray(traces, dtype=float))
    n, T = Y.shape
    lo, hi = opts.lower, opts.upper
    P0 = np.clip(np.atleast_2d(np.asarray(guesses, dtype=float)), lo, hi)
    sw = np.ones_like(Y) if weights is None else np.sqrt(np.atleast_2d(np.asarray(weights, float)))

    P, cost, iters, converged, status = _lm(tau, Y, sw, P0, opts)
    f, J = _model_jac(tau, P)
    Jw = J * sw[..., None]
    H = np.einsum("nti,ntj->nij", Jw, Jw)
    dof = max(T - 4, 1)
    s2 = cost / dof
    cov = np.empty((n, 4, 4))
    for i in range(n):
        try:
            inv = np.linalg.inv(H[i])
        except np.linalg.LinAlgError:
            inv = np.linalg.pinv(H[i])
        if not np.all(np.isfinite(inv)):
            inv = np.linalg.pinv(H[i])
        cov[i] = 0.5 * (inv + inv.T) * s2[i]
    resid = Y - f
    ssr = np.einsum("nt,nt->n", resid, resid)
    at_bound = (P <= lo) | (P >= hi)
    return {
        "params": P,
        "covariance": cov,
        "ssr": ssr,
        "cost": cost,
        "r_squared": _r_squared(Y, ssr),
        "iterations": iters,
        "converged": converged,
        "at_bound": at_bound,
        "status": status,
    }


def fit_trace(trace, tau_list, guess=None, opts=None, weights=None) -> FitResult:
    """Fit one trace. ``guess`` defaults to :func:`initial_guess`."""
    opts = opts or FitOptions()
    tau, y = check_tau_trace(tau_list, trace, min_samples=5)
    if guess is None:
        guess = initial_guess(y, tau, opts.bounds)
    g = guess.to_array() if isinstance(guess, FitParams) else np.asarray(guess, dtype=float)
    w = None if weights is None else np.asarray(weights, dtype=float)[None, :]
    out = fit_batch(tau, y[None, :], g[None, :], opts, w)
    return FitResult(
        params=FitParams.from_array(out["params"][0]),
        covariance=out["covariance"][0],
        residual_norm=float(np.sqrt(out["ssr"][0])),
        r_squared=float(out["r_squared"][0]),
        iterations=int(out["iterations"][0]),
        converged=bool(out["converged"][0]),
        at_bound=tuple(bool(v) for v in out["at_bound"][0]),
        status=str(out["status"][0]),
    )


def brute_force_fit(trace, tau_list, grids) -> FitParams:
    """Exhaustive minimum of the squared residual over a Cartesian parameter grid.

    ``grids`` holds four 1-D arrays for ``(a, c, omega_prime, t2_star)``, each with
    at least two points. Ties resolve to the first grid point in C order.
    """
    tau = np.asarray(tau_list, dtype=float)
    y = np.asarray(trace, dtype=float)
    ga, gc, gw, gt = (np.asarray(g, dtype=float) for g in grids)
    if min(g.size for g in (ga, gc, gw, gt)) < 2:
        raise ValueError("every grid needs at least two points")
    best, best_idx = np.inf, None
    for iw, w in enumerate(gw):
        s2 = np.sin(0.5 * w * tau) ** 2
        for it, t2 in enumerate(gt):
            shape = np.exp(-tau / t2) * s2
            # residual y - a + c*shape over the (a, c) sub-grid
            r = y[None, None, :] - ga[:, None, None] + gc[None, :, None] * shape[None, None, :]
            ssr = np.einsum("act,act->ac", r, r)
            k = int(np.argmin(ssr))
            if ssr.flat[k] < best:
                best = float(ssr.flat[k])
                best_idx = (*np.unravel_index(k, ssr.shape), iw, it)
    ia, ic, iw, it = best_idx
    return FitParams(ga[ia], gc[ic], gw[iw], gt[it])


class RabiFitter(RegressorMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_trace`.

    ``X`` holds the pulse durations in ns (shape ``(T,)`` or ``(T, 1)``) and ``y``
    the normalized PL trace. After ``fit``, ``params_`` and ``result_`` hold the
    solution; ``predict`` evaluates the fitted model.
    """

    def __init__(self, max_iterations=200, rel_tolerance=1e-10, initial_damping=1e-3,
                 bounds=DEFAULT_BOUNDS, guess=None):
        self.max_iterations = max_iterations
        self.rel_tolerance = rel_tolerance
        self.initial_damping = initial_damping
        self.bounds = bounds
        self.guess = guess

    def _options(self):
        return FitOptions(self.max_iterations, self.rel_tolerance, self.initial_damping, self.bounds)

    def fit(self, X, y, sample_weight=None):
        tau = np.asarray(X, dtype=float).reshape(-1)
        self.result_ = fit_trace(y, tau, self.guess, self._options(), sample_weight)
        self.params_ = self.result_.params
        self.t2_star_ = self.params_.t2_star
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        tau = np.asarray(X, dtype=float).reshape(-1)
        return normalized_pl_model(tau, *self.params_.to_array())
