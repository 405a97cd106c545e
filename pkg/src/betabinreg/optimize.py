"""Trust-region Newton maximization of the beta-binomial log-likelihood.

Each iteration minimizes the quadratic model of the negative log-likelihood
inside a ball, solving the subproblem exactly through an eigendecomposition
of the Hessian (Moré-Sorensen).  The dimension is tiny (k + k* + 2), so the
exact solve is cheap and copes with the indefinite Hessians this likelihood
produces away from the optimum.

Linear equality constraints ``A theta = b`` are handled by reparameterizing
``theta = theta_p + N z`` with ``N`` an orthonormal null-space basis of ``A``.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from numba import njit

from .model import EvaluationError, _evaluate, evaluate, link

__all__ = [
    "TrustConfig",
    "ConstraintSpec",
    "FitResult",
    "trust_region_maximize",
    "default_starts",
    "fit",
    "fit_restricted",
]

_EPS_F = 2.220446049250313e-16

# a point with a tiny gradient is only a maximum if the Newton step there is small too
_NEWTON_STEP_TOL = 1e-4


@dataclass(frozen=True)
class TrustConfig:
    initial_radius: float = 1.0
    max_radius: float = 100.0
    accept_threshold: float = 0.1
    expand_threshold: float = 0.75
    shrink_factor: float = 0.25
    expand_factor: float = 2.0
    grad_tol: float = 1e-8
    step_tol: float = 1e-12
    max_iter: int = 300
    n_starts: int = 3

    def __post_init__(self):
        if not (0 < self.initial_radius <= self.max_radius):
            raise ValueError("need 0 < initial_radius <= max_radius")
        if not (0 < self.accept_threshold < self.expand_threshold < 1):
            raise ValueError("need 0 < accept_threshold < expand_threshold < 1")
        if not (0 < self.shrink_factor < 1 < self.expand_factor):
            raise ValueError("need shrink_factor < 1 < expand_factor")
        if self.grad_tol <= 0 or self.step_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1 or self.n_starts < 1:
            raise ValueError("max_iter and n_starts must be positive")


@dataclass(frozen=True)
class ConstraintSpec:
    """Linear hypothesis ``A theta = b``."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if b.shape != (A.shape[0],):
            raise ValueError(f"b must have length {A.shape[0]}")
        if A.shape[0] >= A.shape[1]:
            raise ValueError("need fewer constraints than parameters")
        if np.linalg.matrix_rank(A) < A.shape[0]:
            raise ValueError("constraint matrix A is rank deficient")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def r(self):
        return self.A.shape[0]

    @classmethod
    def select(cls, design, index, values=None):
        """Constraint fixing the coordinates ``index`` of theta (to zero by default)."""
        A = design.selector(index)
        b = np.zeros(A.shape[0]) if values is None else np.asarray(values, dtype=float)
        return cls(A, b)

    def null_space(self):
        """Particular solution and orthonormal null-space basis of ``A``."""
        theta_p = np.linalg.lstsq(self.A, self.b, rcond=None)[0]
        _, _, vt = np.linalg.svd(self.A)
        return theta_p, vt[self.r :].T.copy()


@dataclass
class FitResult:
    theta_hat: np.ndarray
    loglik: float
    observed_info: np.ndarray | None
    converged: bool
    iterations: int
    n_starts_used: int
    boundary_flag: bool
    start_logliks: np.ndarray
    grad_norm: float = math.nan
    gradient: np.ndarray = field(default=None, repr=False)
    hessian: np.ndarray = field(default=None, repr=False)
    constraint: ConstraintSpec | None = field(default=None, repr=False)
    data_key: int | None = field(default=None, repr=False)


@dataclass
class _Solve:
    x: np.ndarray
    f: float
    g: np.ndarray
    H: np.ndarray
    converged: bool
    iterations: int
    hit_boundary: bool
    path: np.ndarray
    path_f: np.ndarray


@njit(cache=True)
def _quad(g, B, s):
    return g @ s + 0.5 * (s @ (B @ s))


@njit(cache=True)
def _solve_subproblem(g, B, radius):
    """Minimize g.s + s.B.s/2 subject to |s| <= radius.

    Returns the step and the predicted decrease (positive when progress is
    expected).
    """
    lam, V = np.linalg.eigh(B)
    gt = V.T @ g
    scale = max(1.0, np.abs(lam).max())
    if lam[0] > 1e-14 * scale:
        st = -gt / lam
        if np.sqrt(np.sum(st * st)) <= radius:
            s = V @ st
            return s, -_quad(g, B, s)

    lo = max(0.0, -lam[0])
    gnorm = np.sqrt(np.sum(g * g))
    singular = np.abs(lam + lo) <= 1e-12 * scale
    hard = True
    for i in range(lam.size):
        if singular[i] and abs(gt[i]) > 1e-12 * max(gnorm, 1e-300):
            hard = False
    if hard:
        # the step may not reach the boundary along the non-singular directions alone
        st = np.zeros_like(gt)
        j = 0
        for i in range(lam.size):
            if singular[i]:
                j = i
            else:
                st[i] = -gt[i] / (lam[i] + lo)
        rest = np.sqrt(np.sum(st * st))
        if rest <= radius:
            st[j] += math.sqrt(max(radius * radius - rest * rest, 0.0))
            s = V @ st
            return s, -_quad(g, B, s)

    # safeguarded Newton on the secular equation 1/radius - 1/|s(mult)| = 0
    left = lo
    right = lo + gnorm / radius + 1.0
    while np.sqrt(np.sum((gt / (lam + right)) ** 2)) > radius:
        right *= 2.0
    mult = lo + 1e-10 * scale if lo > 0.0 else 0.0
    for _ in range(200):
        d = lam + mult
        nrm2 = 0.0
        slope = 0.0
        finite = True
        for i in range(lam.size):
            if d[i] <= 0.0:
                if gt[i] != 0.0:
                    finite = False
                continue
            nrm2 += (gt[i] / d[i]) ** 2
            slope += gt[i] * gt[i] / d[i] ** 3
        nrm = math.sqrt(nrm2)
        if not finite or nrm > radius * (1 + 1e-10):
            left = mult
        elif nrm < radius * (1 - 1e-10):
            right = mult
        else:
            break
        cand = math.nan
        if finite and nrm > 0:
            cand = mult + (1.0 / radius - 1.0 / nrm) * nrm**3 / slope
        if left < cand < right:
            mult = cand
        else:
            mult = 0.5 * (left + right)
    st = np.zeros_like(gt)
    for i in range(lam.size):
        # exactly singular directions carry no gradient here; leave them at zero
        if lam[i] + mult > 0.0:
            st[i] = -gt[i] / (lam[i] + mult)
    s = V @ st
    return s, -_quad(g, B, s)


@njit(cache=True)
def _all_finite(g, H):
    return np.all(np.isfinite(g)) and np.all(np.isfinite(H))


@njit(cache=True)
def _stationary(g, H, grad_tol):
    """Small gradient, negative definite Hessian and a short Newton step.

    The last two rule out flat tails where the gradient decays toward zero
    while the maximizer is still far away (all-zero counts, separation).
    """
    if np.sqrt(np.sum(g * g)) >= grad_tol:
        return False
    lam, V = np.linalg.eigh(-H)
    if lam[0] <= 0.0:
        return False
    gt = V.T @ g
    return np.sqrt(np.sum((gt / lam) ** 2)) <= _NEWTON_STEP_TOL


@njit(cache=True)
def _judge(f, g, f_new, g_new, H_new, pred, accept):
    """``(accepted, rho)`` for a trial step with predicted gain ``pred``."""
    if not (math.isfinite(f_new) and _all_finite(g_new, H_new)):
        return False, 0.0
    actual = f_new - f
    noise = 16.0 * _EPS_F * max(1.0, abs(f))
    if pred <= noise:
        # predicted gain is below roundoff in f: let the gradient decide
        return actual >= -noise or np.sum(g_new * g_new) < np.sum(g * g), 1.0
    rho = actual / pred
    return rho >= accept, rho


@njit(cache=True)
def _new_path(x, f, max_iter):
    path = np.empty((max_iter + 1, x.size))
    path_f = np.empty(max_iter + 1)
    path[0] = x
    path_f[0] = f
    return path, path_f


# The loop below exists twice: ``_trust_core`` takes the objective as an
# argument (any jitted function), ``_trust_core_lik`` calls the likelihood
# directly so that it can be cached on disk.  Keep the two in step.


@njit
def _trust_core(objective, x0, args, radius, max_radius, accept, expand_at, shrink, expand, grad_tol, step_tol, max_iter):
    x = x0.copy()
    f, g, H, hit = objective(x, args)
    path, path_f = _new_path(x, f, max_iter)
    if not (math.isfinite(f) and _all_finite(g, H)):
        return x, f, g, H, False, 0, hit, path[:1], path_f[:1], False
    npath, it, converged = 1, 0, False
    while True:
        if _stationary(g, H, grad_tol):
            converged = True
            break
        if it >= max_iter:
            break
        it += 1
        s, pred = _solve_subproblem(-g, -H, radius)
        snorm = np.sqrt(np.sum(s * s))
        if snorm < step_tol:
            break
        f_new, g_new, H_new, flag_new = objective(x + s, args)
        ok, rho = _judge(f, g, f_new, g_new, H_new, pred, accept)
        if not ok:
            radius = shrink * min(radius, snorm)
            if radius < step_tol:
                break
            continue
        x = x + s
        f, g, H = f_new, g_new, H_new
        hit = hit or flag_new
        path[npath] = x
        path_f[npath] = f
        npath += 1
        if rho > expand_at and snorm >= 0.99 * radius:
            radius = min(expand * radius, max_radius)
    return x, f, g, H, converged, it, hit, path[:npath], path_f[:npath], True


@njit(cache=True)
def _lik_objective(z, args):
    # theta = theta_p + N z; unrestricted fits pass theta_p = 0, N = I
    Z, Zs, W, M, lc, theta_p, N = args
    ll, g, H, clamped = _evaluate(theta_p + N @ z, Z, Zs, W, M, lc, 2)
    return ll, N.T @ g, N.T @ H @ N, clamped


@njit(cache=True)
def _trust_core_lik(x0, args, radius, max_radius, accept, expand_at, shrink, expand, grad_tol, step_tol, max_iter):
    x = x0.copy()
    f, g, H, hit = _lik_objective(x, args)
    path, path_f = _new_path(x, f, max_iter)
    if not (math.isfinite(f) and _all_finite(g, H)):
        return x, f, g, H, False, 0, hit, path[:1], path_f[:1], False
    npath, it, converged = 1, 0, False
    while True:
        if _stationary(g, H, grad_tol):
            converged = True
            break
        if it >= max_iter:
            break
        it += 1
        s, pred = _solve_subproblem(-g, -H, radius)
        snorm = np.sqrt(np.sum(s * s))
        if snorm < step_tol:
            break
        f_new, g_new, H_new, flag_new = _lik_objective(x + s, args)
        ok, rho = _judge(f, g, f_new, g_new, H_new, pred, accept)
        if not ok:
            radius = shrink * min(radius, snorm)
            if radius < step_tol:
                break
            continue
        x = x + s
        f, g, H = f_new, g_new, H_new
        hit = hit or flag_new
        path[npath] = x
        path_f[npath] = f
        npath += 1
        if rho > expand_at and snorm >= 0.99 * radius:
            radius = min(expand * radius, max_radius)
    return x, f, g, H, converged, it, hit, path[:npath], path_f[:npath], True


def trust_region_maximize(objective, x0, config=TrustConfig(), args=(), callback=None):
    """Maximize a numba-compiled ``objective`` starting from ``x0``.

    ``objective(x, args)`` must be an ``@njit`` function returning
    ``(f, grad, hess, flag)``; ``flag`` marks points where the objective hit a
    numerical guard and is reported as ``hit_boundary``.  Non-finite values
    reject the step.  ``callback(x, f)`` is replayed over the start point and
    every accepted iterate.
    """
    x0 = np.ascontiguousarray(x0, dtype=float)
    # the likelihood has its own cached copy of the loop
    core = _trust_core_lik if objective is _lik_objective else _trust_core
    lead = () if objective is _lik_objective else (objective,)
    x, f, g, H, converged, it, hit, path, path_f, ok = core(
        *lead,
        x0,
        args,
        config.initial_radius,
        config.max_radius,
        config.accept_threshold,
        config.expand_threshold,
        config.shrink_factor,
        config.expand_factor,
        config.grad_tol,
        config.step_tol,
        config.max_iter,
    )
    if not ok:
        raise EvaluationError(f"objective is not finite at the start point {x0}")
    if callback is not None:
        for xi, fi in zip(path, path_f):
            callback(xi, fi)
    return _Solve(x, f, g, H, bool(converged), int(it), bool(hit), path, path_f)


def _data_key(data):
    return hash((data.W.tobytes(), data.M.tobytes()))


def _data_args(data, design):
    if data.n != design.n:
        raise ValueError(f"dataset has {data.n} samples but design has {design.n} rows")
    return (design.Z, design.Zstar, data.Wf, data.Mf, data.log_choose)


def default_starts(data, design, n_starts):
    """Moment-based start plus deterministic +/-0.5 perturbations of the intercepts."""
    total_w = float(data.W.sum())
    total_m = float(data.M.sum())
    pooled = min(max(total_w / total_m, 0.5 / total_m), 1.0 - 0.5 / total_m)
    base = np.zeros(design.dim)
    base[0] = link(pooled)
    base[design.k + 1] = link(0.05)
    offsets = [(0.0, 0.0), (0.5, 0.5), (-0.5, -0.5), (0.5, -0.5), (-0.5, 0.5)]
    starts = []
    for i in range(n_starts):
        d_mu, d_phi = offsets[i % len(offsets)]
        widen = 1 + i // len(offsets)
        s = base.copy()
        s[0] += widen * d_mu
        s[design.k + 1] += widen * d_phi
        starts.append(s)
    return starts


def _best(solves):
    logliks = np.array([s.f for s in solves])
    return solves[int(np.argmax(logliks))], logliks


def fit(data, design, config=TrustConfig(), starts=None, callback=None):
    """Unrestricted maximum-likelihood fit; the best of several starts is returned."""
    args = _data_args(data, design) + (np.zeros(design.dim), np.eye(design.dim))
    if starts is None:
        starts = default_starts(data, design, config.n_starts)
    solves = [trust_region_maximize(_lik_objective, s, config, args, callback) for s in starts]
    best, logliks = _best(solves)
    return FitResult(
        theta_hat=best.x,
        loglik=best.f,
        observed_info=-best.H / data.n,
        converged=best.converged,
        iterations=best.iterations,
        n_starts_used=len(solves),
        boundary_flag=best.hit_boundary,
        start_logliks=logliks,
        grad_norm=float(np.linalg.norm(best.g)),
        gradient=best.g,
        hessian=best.H,
        data_key=_data_key(data),
    )


def fit_restricted(data, design, constraint, config=TrustConfig(), starts=None, callback=None):
    """Maximum-likelihood fit subject to ``constraint.A @ theta == constraint.b``."""
    if constraint.A.shape[1] != design.dim:
        raise ValueError(f"constraint has {constraint.A.shape[1]} columns, design has {design.dim} parameters")
    theta_p, N = constraint.null_space()
    args = _data_args(data, design) + (theta_p, N)

    inner_cb = None
    if callback is not None:

        def inner_cb(z, f):
            callback(theta_p + N @ z, f)

    if starts is None:
        starts = default_starts(data, design, config.n_starts)
    solves = [trust_region_maximize(_lik_objective, N.T @ (s - theta_p), config, args, inner_cb) for s in starts]
    best, logliks = _best(solves)
    theta_hat = theta_p + N @ best.x
    _, g_full, H_full, _ = evaluate(theta_hat, data, design, order=2)
    return FitResult(
        theta_hat=theta_hat,
        loglik=best.f,
        observed_info=None,
        converged=best.converged,
        iterations=best.iterations,
        n_starts_used=len(solves),
        boundary_flag=best.hit_boundary,
        start_logliks=logliks,
        grad_norm=float(np.linalg.norm(best.g)),
        gradient=g_full,
        hessian=H_full,
        constraint=constraint,
        data_key=_data_key(data),
    )
