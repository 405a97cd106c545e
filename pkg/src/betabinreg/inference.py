"""Wald and likelihood-ratio tests of linear hypotheses ``A theta = b``.

When a binary covariate level (or the whole dataset) has no counts at all, an
estimate diverges and Wald inference is uninformative.  Wald-type tests then
report a statistic of zero (p-value one) with ``degenerate=True``.  The
likelihood-ratio statistic for hypotheses that involve only overdispersion
coefficients is identically zero in that situation and is reported the same
way.
"""

from dataclasses import dataclass
import math
import warnings

import numpy as np

from .model import hessian
from .optimize import FitResult, TrustConfig, fit, fit_restricted
from .special import chi2_sf

__all__ = [
    "METHODS",
    "SingularInformationError",
    "TestResult",
    "observed_information",
    "wald_statistic",
    "wald_test",
    "lr_test",
    "detect_separation",
    "lrt_uninformative",
    "fit_pair",
]

METHODS = ("wald", "lrt", "pb_wald", "pb_lrt")

#: Largest condition number of the observed information accepted for Wald inference.
MAX_CONDITION = 1e12

#: Negative LRT statistics down to this value are treated as solver noise.
LRT_NOISE = 1e-8

_TINY = np.finfo(float).tiny


class SingularInformationError(np.linalg.LinAlgError):
    """Observed information (or A I^-1 A^T) is too ill-conditioned to invert."""


@dataclass
class TestResult:
    statistic: float
    df: int
    p_value: float
    method: str
    degenerate: bool = False
    boot_reps: int | None = None
    n_failed: int = 0

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")


def _pvalue(stat, df):
    return max(chi2_sf(stat, df), _TINY)


def observed_information(fit_or_theta, data, design):
    """Observed Fisher information -H(theta)/n.

    Accepts a :class:`FitResult` or a raw parameter vector.
    """
    theta = fit_or_theta.theta_hat if isinstance(fit_or_theta, FitResult) else fit_or_theta
    info = -hessian(theta, data, design) / data.n
    info = 0.5 * (info + info.T)
    _check_condition(info)
    return info


def _check_condition(info):
    cond = np.linalg.cond(info)
    if not math.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularInformationError(f"observed information has condition number {cond:.3g}")


def wald_statistic(theta_hat, info, constraint, n):
    """n (A theta - b)^T (A I^-1 A^T)^-1 (A theta - b)."""
    _check_condition(info)
    A, b = constraint.A, constraint.b
    resid = A @ theta_hat - b
    middle = A @ np.linalg.solve(info, A.T)
    middle = 0.5 * (middle + middle.T)
    eig = np.linalg.eigvalsh(middle)
    if eig[0] <= 0 or eig[-1] / eig[0] > MAX_CONDITION:
        raise SingularInformationError("A I^-1 A^T is not positive definite")
    return float(n * resid @ np.linalg.solve(middle, resid))


def _degenerate(method, df):
    return TestResult(statistic=0.0, df=df, p_value=1.0, method=method, degenerate=True)


def wald_test(fit_full, constraint, n, separated=False):
    """Wald test of ``constraint`` from an unrestricted fit on ``n`` samples.

    ``separated`` carries the result of :func:`detect_separation`; a separated
    dataset, a fit that ran into the predictor clamp, or a singular
    information matrix give the degenerate result (statistic 0, p-value 1).
    """
    r = constraint.r
    if separated or fit_full.boundary_flag:
        return _degenerate("wald", r)
    if fit_full.observed_info is None:
        raise ValueError("wald_test needs an unrestricted fit")
    if not fit_full.converged:
        raise ValueError("wald_test needs a converged fit")
    try:
        stat = wald_statistic(fit_full.theta_hat, fit_full.observed_info, constraint, n)
    except SingularInformationError as exc:
        warnings.warn(f"Wald inference uninformative: {exc}", RuntimeWarning, stacklevel=2)
        return _degenerate("wald", r)
    stat = max(stat, 0.0)
    return TestResult(statistic=stat, df=r, p_value=_pvalue(stat, r), method="wald")


def lr_statistic(fit_full, fit_null):
    if fit_full.data_key != fit_null.data_key:
        raise ValueError("full and null fits were computed on different data")
    stat = 2.0 * (fit_full.loglik - fit_null.loglik)
    if stat < 0:
        if stat < -LRT_NOISE:
            raise ArithmeticError(
                f"restricted fit beat the unrestricted fit by {-stat / 2:.3g}; the unrestricted fit did not converge"
            )
        stat = 0.0
    return stat


def lr_test(fit_full, fit_null, r, degenerate=False):
    """Likelihood-ratio test 2 (logL(full) - logL(null)) against chi-squared(r)."""
    if degenerate:
        return _degenerate("lrt", r)
    stat = lr_statistic(fit_full, fit_null)
    return TestResult(statistic=stat, df=r, p_value=_pvalue(stat, r), method="lrt")


def _binary_columns(design):
    cols = []
    for mat in (design.X, design.Xstar):
        for j in range(mat.shape[1]):
            col = mat[:, j]
            if np.all((col == 0) | (col == 1)) and 0 < col.sum() < col.size:
                cols.append(col)
    return cols


def detect_separation(data, design, constraint=None):
    """True when all counts are zero, or some level of a binary covariate has only zero counts.

    Both levels of every 0/1 column of ``X`` and ``Xstar`` are checked.
    ``constraint`` is accepted for interface symmetry; the condition is a
    property of the data and design alone.
    """
    if data.n != design.n:
        raise ValueError("data and design disagree on the number of samples")
    W = data.W
    if W.sum() == 0:
        return True
    for col in _binary_columns(design):
        if W[col == 1].sum() == 0 or W[col == 0].sum() == 0:
            return True
    return False


def lrt_uninformative(design, constraint, separated):
    """Whether the LRT is identically zero: separated data and a hypothesis on overdispersion coefficients only."""
    if not separated:
        return False
    touched = np.flatnonzero(np.any(constraint.A != 0, axis=0))
    return bool(np.all(touched >= design.k + 1))


def fit_pair(data, design, constraint, config=TrustConfig()):
    """Unrestricted and restricted fits, keeping the pair consistent.

    The restricted optimum is a feasible point of the unrestricted problem, so
    if it has the larger likelihood the unrestricted fit is restarted from it.
    """
    full = fit(data, design, config)
    null = fit_restricted(data, design, constraint, config)
    if null.loglik > full.loglik:
        retry = fit(data, design, config, starts=[null.theta_hat])
        if retry.loglik > full.loglik:
            retry.start_logliks = np.concatenate([full.start_logliks, retry.start_logliks])
            retry.n_starts_used = full.n_starts_used + 1
            full = retry
    return full, null
