"""Beta-binomial regression with logit links for the mean and the overdispersion.

For sample ``i`` with count ``W_i`` out of depth ``M_i``::

    logit(mu_i)  = beta0  + X_i . beta
    logit(phi_i) = beta0* + X*_i . beta*
    W_i ~ BetaBinomial(M_i, a1_i, a2_i),  a1 = mu / gamma,  a2 = (1 - mu) / gamma,
    gamma = phi / (1 - phi)

The parameter vector is stacked as ``(beta0, beta, beta0*, beta*)``.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from numba import njit

from .special import _digamma_diff, _log_rising, _log_rising_excess, _trigamma_diff, log_choose

__all__ = [
    "ETA_CLAMP",
    "Dataset",
    "DesignPair",
    "Theta",
    "LinkedParams",
    "link",
    "inv_link",
    "linked_params",
    "log_likelihood",
    "gradient",
    "hessian",
    "evaluate",
    "moments",
]

#: Linear predictors are clamped to [-ETA_CLAMP, ETA_CLAMP] before the inverse link.
ETA_CLAMP = 30.0


class EvaluationError(ArithmeticError):
    """The likelihood or one of its derivatives evaluated to a non-finite value."""


@dataclass(frozen=True)
class Dataset:
    """Observed counts ``W`` out of sequencing depths ``M``, one entry per sample."""

    W: np.ndarray
    M: np.ndarray
    log_choose: np.ndarray = field(init=False, repr=False, compare=False)
    Wf: np.ndarray = field(init=False, repr=False, compare=False)
    Mf: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        W = np.asarray(self.W)
        M = np.asarray(self.M)
        if W.ndim != 1 or M.ndim != 1 or W.shape != M.shape or W.size == 0:
            raise ValueError("W and M must be nonempty vectors of equal length")
        for name, v in (("W", W), ("M", M)):
            if not np.all(np.isfinite(v.astype(float))) or np.any(np.asarray(v, dtype=float) % 1 != 0):
                raise ValueError(f"{name} must contain integers")
        W = W.astype(np.int64)
        M = M.astype(np.int64)
        if np.any(M <= 0):
            raise ValueError("depths M must be positive")
        if np.any(W < 0) or np.any(W > M):
            raise ValueError("counts must satisfy 0 <= W <= M")
        Wf = W.astype(float)
        Mf = M.astype(float)
        lc = np.array([log_choose(m, w) for w, m in zip(W, M)])
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "log_choose", lc)
        object.__setattr__(self, "Wf", Wf)
        object.__setattr__(self, "Mf", Mf)

    @property
    def n(self):
        return self.W.size

    def subset(self, idx):
        return Dataset(self.W[idx], self.M[idx])


def _as_matrix(X, n, name):
    if X is None:
        return np.zeros((n, 0))
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] != n:
        raise ValueError(f"{name} must have {n} rows, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


@dataclass(frozen=True)
class DesignPair:
    """Covariates for the mean (``X``) and overdispersion (``Xstar``) submodels.

    Intercepts are implicit: never include a column of ones.
    """

    X: np.ndarray
    Xstar: np.ndarray
    Z: np.ndarray = field(init=False, repr=False, compare=False)
    Zstar: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float) if self.X is not None else None
        Xs = np.asarray(self.Xstar, dtype=float) if self.Xstar is not None else None
        n = None
        for arr in (X, Xs):
            if arr is not None:
                n = arr.shape[0]
                break
        if n is None:
            raise ValueError("use DesignPair.intercept_only(n) when there are no covariates")
        X = _as_matrix(X, n, "X")
        Xs = _as_matrix(Xs, n, "Xstar")
        Z = np.ascontiguousarray(np.column_stack([np.ones(n), X]))
        Zs = np.ascontiguousarray(np.column_stack([np.ones(n), Xs]))
        for name, mat in (("[1 X]", Z), ("[1 Xstar]", Zs)):
            if np.linalg.matrix_rank(mat) < mat.shape[1]:
                raise ValueError(f"design {name} is not of full column rank")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Xstar", Xs)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "Zstar", Zs)

    @classmethod
    def intercept_only(cls, n):
        return cls(np.zeros((n, 0)), np.zeros((n, 0)))

    @property
    def n(self):
        return self.Z.shape[0]

    @property
    def k(self):
        return self.X.shape[1]

    @property
    def kstar(self):
        return self.Xstar.shape[1]

    @property
    def dim(self):
        return self.k + self.kstar + 2

    def mean_slope_index(self):
        """Positions of ``beta`` (mean slopes) in the stacked parameter vector."""
        return np.arange(1, self.k + 1)

    def dispersion_slope_index(self):
        """Positions of ``beta*`` (overdispersion slopes) in the stacked parameter vector."""
        return np.arange(self.k + 2, self.dim)

    def selector(self, index):
        """Constraint matrix whose rows pick out the given coordinates."""
        index = np.atleast_1d(index)
        A = np.zeros((index.size, self.dim))
        A[np.arange(index.size), index] = 1.0
        return A

    def subset(self, idx):
        return DesignPair(self.X[idx], self.Xstar[idx])


@dataclass(frozen=True)
class Theta:
    beta0: float
    beta: np.ndarray
    beta0star: float
    betastar: np.ndarray

    @property
    def vector(self):
        return np.concatenate([[self.beta0], np.atleast_1d(self.beta), [self.beta0star], np.atleast_1d(self.betastar)]).astype(float)

    @classmethod
    def from_vector(cls, vec, k, kstar):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (k + kstar + 2,):
            raise ValueError(f"expected a vector of length {k + kstar + 2}, got shape {vec.shape}")
        return cls(vec[0], vec[1 : k + 1].copy(), vec[k + 1], vec[k + 2 :].copy())


@dataclass(frozen=True)
class LinkedParams:
    mu: np.ndarray
    phi: np.ndarray
    gamma: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    clamped: bool = False


def link(p):
    """Logit link, log(p / (1 - p))."""
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)) or np.any(np.isnan(p)):
        raise ValueError("link is defined on the open interval (0, 1)")
    out = np.log(p) - np.log1p(-p)
    return out.item() if out.ndim == 0 else out


def inv_link(eta):
    """Inverse logit that never overflows: exp(-|eta|) is always <= 1."""
    eta = np.asarray(eta, dtype=float)
    e = np.exp(-np.abs(eta))
    out = np.where(eta >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out.item() if out.ndim == 0 else out


def _theta_vector(theta, design):
    vec = theta.vector if isinstance(theta, Theta) else np.asarray(theta, dtype=float)
    if vec.shape != (design.dim,):
        raise ValueError(f"theta has shape {vec.shape}, design expects ({design.dim},)")
    if not np.all(np.isfinite(vec)):
        raise ValueError("theta must be finite")
    return vec


def _check_pair(data, design):
    if data.n != design.n:
        raise ValueError(f"dataset has {data.n} samples but design has {design.n} rows")


def linked_params(theta, design):
    vec = _theta_vector(theta, design)
    p = design.k + 1
    eta = design.Z @ vec[:p]
    etas = design.Zstar @ vec[p:]
    clamped = bool(np.any(np.abs(eta) >= ETA_CLAMP) or np.any(np.abs(etas) >= ETA_CLAMP))
    eta = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
    etas = np.clip(etas, -ETA_CLAMP, ETA_CLAMP)
    mu = inv_link(eta)
    phi = inv_link(etas)
    gamma = np.exp(etas)
    inv_gamma = np.exp(-etas)
    return LinkedParams(
        mu=np.atleast_1d(mu),
        phi=np.atleast_1d(phi),
        gamma=gamma,
        a1=np.atleast_1d(mu) * inv_gamma,
        a2=np.atleast_1d(inv_link(-eta)) * inv_gamma,
        clamped=clamped,
    )


@njit(cache=True)
def _expit_pair(eta):
    e = math.exp(-abs(eta))
    if eta >= 0:
        return 1.0 / (1.0 + e), e / (1.0 + e)
    return e / (1.0 + e), 1.0 / (1.0 + e)


@njit(cache=True)
def _log_kernel(eta, a1, a2, inv_g, w, m):
    # rising-factorial grouping: well conditioned unless a1 and a2 are both huge
    r1 = _log_rising(a1, w)
    r2 = _log_rising(a2 + (m - w), a1 + w)
    r3 = _log_rising(a2, a1)
    big_rising = max(abs(r1), abs(r2), abs(r3))
    # binomial log-pmf plus corrections that vanish as gamma -> 0
    e = math.exp(-abs(eta))
    if eta >= 0:
        log_mu = -math.log1p(e)
        log_one_mu = -eta - math.log1p(e)
    else:
        log_mu = eta - math.log1p(e)
        log_one_mu = -math.log1p(e)
    b1 = w * log_mu if w > 0 else 0.0
    b2 = (m - w) * log_one_mu if m > w else 0.0
    e1 = _log_rising_excess(a1, w)
    e2 = _log_rising_excess(a2, m - w)
    e3 = _log_rising_excess(inv_g, m)
    big_binom = max(abs(b1), abs(b2), abs(e1), abs(e2), abs(e3))
    if big_rising <= big_binom:
        return r1 - r2 + r3
    return b1 + b2 + e1 + e2 - e3


@njit(cache=True)
def _evaluate(theta, Z, Zs, W, M, log_choose, order):
    n, p = Z.shape
    q = Zs.shape[1]
    d = p + q
    ll = 0.0
    g = np.zeros(d)
    H = np.zeros((d, d))
    clamped = False
    for i in range(n):
        eta = 0.0
        for j in range(p):
            eta += Z[i, j] * theta[j]
        etas = 0.0
        for j in range(q):
            etas += Zs[i, j] * theta[p + j]
        free_mu = True
        free_phi = True
        if eta > 30.0:
            eta = 30.0
            free_mu = False
        elif eta < -30.0:
            eta = -30.0
            free_mu = False
        if etas > 30.0:
            etas = 30.0
            free_phi = False
        elif etas < -30.0:
            etas = -30.0
            free_phi = False
        if abs(eta) >= 30.0 or abs(etas) >= 30.0:
            clamped = True

        mu, one_mu = _expit_pair(eta)
        gam = math.exp(etas)
        inv_g = math.exp(-etas)
        a1 = mu * inv_g
        a2 = one_mu * inv_g
        w = W[i]
        m = M[i]
        # lgamma(a1+W) - lgamma(a1) + lgamma(a2+M-W) - lgamma(a2) + lgamma(a1+a2) - lgamma(a1+a2+M),
        # in whichever of two equivalent groupings has the smaller terms
        ll += log_choose[i] + _log_kernel(eta, a1, a2, inv_g, w, m)
        if order == 0:
            continue

        # digamma differences: d1 = psi(a1+W)-psi(a1), d2 = psi(a2+M-W)-psi(a2), d0 = psi(M+1/g)-psi(1/g)
        d1 = _digamma_diff(a1, w)
        d2 = _digamma_diff(a2, m - w)
        d0 = _digamma_diff(inv_g, m)
        u = mu * one_mu
        D = d1 - d2
        Q = d0 - mu * d1 - one_mu * d2
        c4 = D * inv_g
        c5 = Q * inv_g * inv_g
        ge = u * c4 if free_mu else 0.0
        gs = gam * c5 if free_phi else 0.0
        for j in range(p):
            g[j] += ge * Z[i, j]
        for j in range(q):
            g[p + j] += gs * Zs[i, j]
        if order == 1:
            continue

        t1 = _trigamma_diff(a1, w)
        t2 = _trigamma_diff(a2, m - w)
        t0 = _trigamma_diff(inv_g, m)
        inv_g2 = inv_g * inv_g
        c1 = (t2 + t1) * inv_g2
        # the trigamma(a1) pair carries a factor mu (required for d2l/deta deta*)
        c2 = (gam * (d2 - d1) + one_mu * t2 - mu * t1) * inv_g2 * inv_g
        c3 = (-2.0 * gam * Q - t0 + one_mu * one_mu * t2 + mu * mu * t1) * inv_g2 * inv_g2
        hee = c1 * u * u + c4 * u * (1.0 - 2.0 * mu) if free_mu else 0.0
        hes = c2 * u * gam if (free_mu and free_phi) else 0.0
        hss = c3 * gam * gam + c5 * gam if free_phi else 0.0
        # fill one triangle and mirror so H is exactly symmetric
        for j in range(p):
            zj = Z[i, j]
            for l in range(j + 1):
                v = hee * zj * Z[i, l]
                H[j, l] += v
                if l != j:
                    H[l, j] += v
            for l in range(q):
                v = hes * zj * Zs[i, l]
                H[j, p + l] += v
                H[p + l, j] += v
        for j in range(q):
            zj = Zs[i, j]
            for l in range(j + 1):
                v = hss * zj * Zs[i, l]
                H[p + j, p + l] += v
                if l != j:
                    H[p + l, p + j] += v
    return ll, g, H, clamped


def evaluate(theta, data, design, order=2):
    """Log-likelihood and (for ``order`` >= 1, 2) its gradient and Hessian.

    Returns ``(loglik, grad, hess, clamped)`` where ``clamped`` reports whether
    any linear predictor hit the +/-ETA_CLAMP guard.  Derivatives are those of
    the clamped objective, so clamped predictors contribute zero slope.
    """
    _check_pair(data, design)
    vec = _theta_vector(theta, design)
    ll, g, H, clamped = _evaluate(
        vec, design.Z, design.Zstar, data.Wf, data.Mf, data.log_choose, order
    )
    if not math.isfinite(ll) or (order >= 1 and not np.all(np.isfinite(g))) or (order >= 2 and not np.all(np.isfinite(H))):
        raise EvaluationError(f"non-finite likelihood or derivative at theta={vec}")
    return ll, g, H, clamped


def log_likelihood(theta, data, design):
    return evaluate(theta, data, design, order=0)[0]


def gradient(theta, data, design):
    return evaluate(theta, data, design, order=1)[1]


def hessian(theta, data, design):
    return evaluate(theta, data, design, order=2)[2]


def moments(theta, design, M):
    """Mean, variance and within-sample correlation of each count.

    Returns ``(M mu, M mu (1 - mu) (1 + (M - 1) phi), phi)``.
    """
    M = np.asarray(M, dtype=float)
    if M.shape != (design.n,):
        raise ValueError(f"M must have length {design.n}")
    lp = linked_params(theta, design)
    mean = M * lp.mu
    var = M * lp.mu * (1.0 - lp.mu) * (1.0 + (M - 1.0) * lp.phi)
    return mean, var, lp.phi
