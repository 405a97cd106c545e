"""Beta-binomial simulation and parametric-bootstrap Wald / likelihood-ratio tests.

Every replicate draws from its own random stream derived from
``(seed, stream_id, replicate)``, so results do not depend on the order in
which replicates run or on how many worker processes share them.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
import warnings

import numpy as np

from .inference import (
    SingularInformationError,
    TestResult,
    detect_separation,
    fit_pair,
    lr_statistic,
    lrt_uninformative,
    wald_statistic,
)
from .model import Dataset, linked_params
from .optimize import TrustConfig, fit, fit_restricted

__all__ = [
    "DEFAULT_B",
    "RngStream",
    "sample_beta_binomial",
    "pb_wald_test",
    "pb_lr_test",
    "pb_tests",
]

DEFAULT_B = 10_000

#: Share of failed replicates above which a warning is emitted.
FAILURE_WARN_FRACTION = 0.01


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream identified by a seed and a (possibly nested) stream id."""

    seed: int
    stream_id: int | tuple = ()

    @property
    def key(self):
        sid = self.stream_id
        return tuple(sid) if isinstance(sid, tuple) else (int(sid),)

    def child(self, index):
        return RngStream(self.seed, self.key + (int(index),))

    def generator(self):
        ss = np.random.SeedSequence(entropy=int(self.seed) & (2**64 - 1), spawn_key=self.key)
        return np.random.Generator(np.random.PCG64(ss))


def _as_generator(rng):
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError("rng must be an RngStream or numpy Generator")


def _log_gamma_variates(gen, shape):
    # Gamma(a) = Gamma(a + 1) * U^(1/a); the log form keeps tiny shapes from underflowing
    shape = np.asarray(shape, dtype=float)
    small = shape < 1.0
    out = np.log(gen.standard_gamma(np.where(small, shape + 1.0, shape)))
    u = gen.random(shape.shape)
    out = np.where(small, out + np.log(u) / shape, out)
    return out


def sample_beta_binomial(theta, design, M, rng):
    """Draw one count per sample: Z ~ Beta(a1, a2) as a ratio of gammas, then W ~ Binomial(M, Z)."""
    gen = _as_generator(rng)
    M = np.asarray(M, dtype=np.int64)
    if M.shape != (design.n,):
        raise ValueError(f"M must have length {design.n}")
    lp = linked_params(theta, design)
    log_g1 = _log_gamma_variates(gen, lp.a1)
    log_g2 = _log_gamma_variates(gen, lp.a2)
    diff = log_g2 - log_g1
    # Z = g1 / (g1 + g2) = 1 / (1 + exp(log g2 - log g1))
    e = np.exp(-np.abs(diff))
    Z = np.where(diff >= 0, e / (1.0 + e), 1.0 / (1.0 + e))
    return gen.binomial(M, Z)


def _replicate(task):
    """Simulate one dataset under the null fit and compute the requested statistics.

    Returns ``(wald, lrt)``; ``None`` marks a statistic whose refit failed.
    """
    theta_null, data_M, design, constraint, stream, config, want_wald, want_lrt = task
    W = sample_beta_binomial(theta_null, design, data_M, stream)
    data = Dataset(W, data_M)
    separated = detect_separation(data, design, constraint)
    full = fit(data, design, config)
    wald = lrt = None
    if want_wald:
        if separated or full.boundary_flag:
            wald = 0.0
        elif full.converged:
            try:
                wald = max(wald_statistic(full.theta_hat, full.observed_info, constraint, data.n), 0.0)
            except SingularInformationError:
                wald = 0.0
    if want_lrt:
        if lrt_uninformative(design, constraint, separated):
            lrt = 0.0
        else:
            null = fit_restricted(data, design, constraint, config)
            if null.loglik > full.loglik:
                retry = fit(data, design, config, starts=[null.theta_hat])
                if retry.loglik > full.loglik:
                    full = retry
            ok = (full.converged or full.boundary_flag) and (null.converged or null.boundary_flag)
            if ok:
                try:
                    lrt = lr_statistic(full, null)
                except ArithmeticError:
                    lrt = None
    return wald, lrt


def _run_replicates(tasks, workers):
    if workers is None or workers <= 1 or len(tasks) < 2:
        return [_replicate(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_replicate, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def _bootstrap_pvalue(observed, replicates, method, df, B):
    valid = [t for t in replicates if t is not None]
    failed = len(replicates) - len(valid)
    if failed > FAILURE_WARN_FRACTION * B:
        warnings.warn(
            f"{method}: {failed} of {B} bootstrap replicates failed to converge and were excluded",
            RuntimeWarning,
            stacklevel=3,
        )
    exceed = sum(1 for t in valid if t >= observed)
    p = (1 + exceed) / (len(valid) + 1)
    return TestResult(statistic=observed, df=df, p_value=p, method=method, boot_reps=len(valid), n_failed=failed)


def pb_tests(data, design, constraint, B=DEFAULT_B, rng=None, methods=("pb_wald", "pb_lrt"), config=TrustConfig(), workers=None):
    """Parametric-bootstrap Wald and/or LRT p-values sharing one set of replicates.

    Replicate ``b`` uses ``rng.child(b)``; the unrestricted refit of each
    replicate serves both statistics.  Returns a dict keyed by method.
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    methods = tuple(methods)
    if not set(methods) <= {"pb_wald", "pb_lrt"} or not methods:
        raise ValueError(f"methods must be drawn from pb_wald, pb_lrt; got {methods}")
    if rng is None:
        rng = RngStream(0)
    if not isinstance(rng, RngStream):
        raise TypeError("bootstrap tests need an RngStream so replicates can be split reproducibly")
    r = constraint.r
    separated = detect_separation(data, design, constraint)
    full, null = fit_pair(data, design, constraint, config)
    if not (null.converged or null.boundary_flag):
        raise ArithmeticError("restricted fit under the null hypothesis did not converge")

    results = {}
    observed = {}
    if "pb_wald" in methods:
        if separated or full.boundary_flag:
            results["pb_wald"] = TestResult(0.0, r, 1.0, "pb_wald", degenerate=True, boot_reps=0)
        else:
            if not full.converged:
                raise ArithmeticError("unrestricted fit did not converge")
            try:
                observed["pb_wald"] = max(wald_statistic(full.theta_hat, full.observed_info, constraint, data.n), 0.0)
            except SingularInformationError:
                results["pb_wald"] = TestResult(0.0, r, 1.0, "pb_wald", degenerate=True, boot_reps=0)
    if "pb_lrt" in methods:
        if lrt_uninformative(design, constraint, separated):
            results["pb_lrt"] = TestResult(0.0, r, 1.0, "pb_lrt", degenerate=True, boot_reps=0)
        else:
            observed["pb_lrt"] = lr_statistic(full, null)

    if observed:
        want_wald = "pb_wald" in observed
        want_lrt = "pb_lrt" in observed
        tasks = [
            (null.theta_hat, data.M, design, constraint, rng.child(b), config, want_wald, want_lrt) for b in range(B)
        ]
        reps = _run_replicates(tasks, workers)
        if want_wald:
            results["pb_wald"] = _bootstrap_pvalue(observed["pb_wald"], [w for w, _ in reps], "pb_wald", r, B)
        if want_lrt:
            results["pb_lrt"] = _bootstrap_pvalue(observed["pb_lrt"], [l for _, l in reps], "pb_lrt", r, B)
    return {m: results[m] for m in methods}


def pb_wald_test(data, design, constraint, B=DEFAULT_B, rng=None, config=TrustConfig(), workers=None):
    """Parametric-bootstrap Wald test: p = (1 + #{T_b >= T}) / (B + 1)."""
    return pb_tests(data, design, constraint, B, rng, ("pb_wald",), config, workers)["pb_wald"]


def pb_lr_test(data, design, constraint, B=DEFAULT_B, rng=None, config=TrustConfig(), workers=None):
    """Parametric-bootstrap LRT; each replicate refits both the full and the restricted model."""
    return pb_tests(data, design, constraint, B, rng, ("pb_lrt",), config, workers)["pb_lrt"]
