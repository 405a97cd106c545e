"""Monte-Carlo Type I error and power studies on a two-group design.

Samples ``1 .. n/2 - 1`` get covariate 0 and the rest covariate 1, in both
submodels.  Five parameter settings are provided: S1-S3 are null settings for
the hypotheses listed in ``NULLS``; S4 and S5 scale the mean slope (S4) or
the dispersion slope (S5) of a base configuration by ``c`` to trace power.
"""

from concurrent.futures import ProcessPoolExecutor
import csv
from dataclasses import dataclass, field
import json
import math
import warnings

import numpy as np

from .bootstrap import RngStream, pb_tests, sample_beta_binomial
from .inference import METHODS, detect_separation, fit_pair, lr_test, lrt_uninformative, wald_test
from .model import Dataset, DesignPair
from .optimize import ConstraintSpec, TrustConfig

__all__ = [
    "SETTINGS",
    "NULLS",
    "DEPTH_RANGE",
    "SimScenario",
    "SimReport",
    "default_depth_pool",
    "draw_depths",
    "design_half_split",
    "setting_theta",
    "run_scenario",
    "power_curve",
    "ks_uniform",
    "rejection_rate",
]

# (beta0, beta1, beta0*, beta1*)
SETTINGS = {
    "S1": (-5.75, 0.0, -5.24, 0.0),
    "S2": (-5.36, -1.12, -5.69, 0.0),
    "S3": (-5.51, 0.0, -5.38, 0.70),
    "S4": (-5.17, -2.46, -5.13, -3.88),
    "S5": (-5.17, -2.46, -5.13, -3.88),
}

# parameter indices set to zero under each setting's null hypothesis
NULLS = {"S1": (1, 3), "S2": (3,), "S3": (1,), "S4": (1,), "S5": (3,)}

DEPTH_RANGE = (7821, 58655)

LEVEL = 0.05


def default_depth_pool(size=31):
    """``size`` depths evenly spaced on the log scale over ``DEPTH_RANGE``, rounded to integers."""
    lo, hi = DEPTH_RANGE
    return np.rint(np.geomspace(lo, hi, size)).astype(np.int64)


def draw_depths(pool, n, rng):
    """``n`` draws with replacement from ``pool``."""
    pool = np.asarray(pool, dtype=np.int64)
    if pool.size == 0:
        raise ValueError("depth pool is empty")
    if np.any(pool <= 0):
        raise ValueError("depths must be positive")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    return pool[gen.integers(0, pool.size, size=n)]


def design_half_split(n):
    """Binary covariate shared by both submodels: ``n/2 - 1`` zeros followed by ``n/2 + 1`` ones."""
    if n % 2 or n < 4:
        raise ValueError(f"n must be an even integer >= 4, got {n}")
    x = np.r_[np.zeros(n // 2 - 1), np.ones(n // 2 + 1)][:, None]
    return DesignPair(x, x)


def setting_theta(setting, c=1.0):
    """True parameter vector of a setting; ``c`` scales beta1 (S4) or beta1* (S5)."""
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}; choose from {sorted(SETTINGS)}")
    theta = np.array(SETTINGS[setting])
    if setting in ("S4", "S5"):
        if not 0.0 <= c <= 1.0:
            raise ValueError("scale c must lie in [0, 1]")
        theta[1 if setting == "S4" else 3] *= c
    return theta


def null_constraint(setting, design):
    return ConstraintSpec.select(design, list(NULLS[setting]))


@dataclass(frozen=True)
class SimScenario:
    setting: str
    n: int
    n_sims: int = 1000
    methods: tuple = ("wald", "lrt")
    scale_c: float = 1.0
    B: int = 200
    depth_pool: tuple = None
    seed: int = 0
    redraw_depths: bool = True

    def __post_init__(self):
        setting_theta(self.setting, self.scale_c)
        design_half_split(self.n)
        if self.n_sims < 1:
            raise ValueError("n_sims must be positive")
        bad = set(self.methods) - set(METHODS)
        if bad or not self.methods:
            raise ValueError(f"methods must be drawn from {METHODS}")
        if self.B < 1:
            raise ValueError("B must be positive")
        pool = default_depth_pool() if self.depth_pool is None else np.asarray(self.depth_pool, dtype=np.int64)
        if pool.size == 0:
            raise ValueError("depth pool is empty")
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "depth_pool", tuple(int(v) for v in pool))

    @property
    def theta_true(self):
        return setting_theta(self.setting, self.scale_c)


def rejection_rate(p, level=LEVEL):
    """Share of p-values at or below ``level`` among the non-missing ones."""
    p = np.asarray(p, dtype=float)
    p = p[~np.isnan(p)]
    if p.size == 0:
        return math.nan
    return float(np.count_nonzero(p <= level)) / p.size


def ks_uniform(p):
    """Kolmogorov-Smirnov distance between the empirical CDF of ``p`` and Uniform(0, 1)."""
    p = np.sort(np.asarray(p, dtype=float))
    p = p[~np.isnan(p)]
    m = p.size
    if m == 0:
        return math.nan
    i = np.arange(1, m + 1)
    return float(max(np.max(i / m - p), np.max(p - (i - 1) / m)))


@dataclass
class SimReport:
    scenario: SimScenario
    p_values: dict
    statistics: dict
    degenerate: dict
    failures: dict = field(default_factory=dict)

    def rejection_rates(self, level=LEVEL):
        return {m: rejection_rate(p, level) for m, p in self.p_values.items()}

    def ks_statistics(self):
        return {m: ks_uniform(p) for m, p in self.p_values.items()}

    def summary(self):
        s = self.scenario
        return {
            "setting": s.setting,
            "n": s.n,
            "n_sims": s.n_sims,
            "scale_c": s.scale_c,
            "B": s.B,
            "seed": s.seed,
            "methods": list(s.methods),
            "rejection_rate": self.rejection_rates(),
            "ks_statistic": self.ks_statistics(),
            "failures": {m: int(self.failures.get(m, 0)) for m in s.methods},
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replicate", "method", "p_value", "statistic", "degenerate"])
            for m in self.scenario.methods:
                for i, (p, t, d) in enumerate(zip(self.p_values[m], self.statistics[m], self.degenerate[m])):
                    w.writerow([i, m, format(float(p), ".17g"), format(float(t), ".17g"), int(bool(d))])

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _one_replicate(task):
    scenario, b, config = task
    stream = RngStream(scenario.seed, (b,))
    design = design_half_split(scenario.n)
    pool = np.asarray(scenario.depth_pool)
    # fixed depths come from the root stream, which no replicate key (b,) can collide with
    depth_stream = stream.child(0) if scenario.redraw_depths else RngStream(scenario.seed)
    M = draw_depths(pool, scenario.n, depth_stream)
    W = sample_beta_binomial(scenario.theta_true, design, M, stream.child(1))
    data = Dataset(W, M)
    constraint = null_constraint(scenario.setting, design)
    out = {}
    plain = [m for m in scenario.methods if m in ("wald", "lrt")]
    boot = [m for m in scenario.methods if m in ("pb_wald", "pb_lrt")]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if plain:
            separated = detect_separation(data, design, constraint)
            full, null = fit_pair(data, design, constraint, config)
            for m in plain:
                try:
                    if m == "wald":
                        res = wald_test(full, constraint, data.n, separated)
                    else:
                        if not ((full.converged or full.boundary_flag) and (null.converged or null.boundary_flag)):
                            raise ArithmeticError("fit did not converge")
                        res = lr_test(full, null, constraint.r, lrt_uninformative(design, constraint, separated))
                    out[m] = res
                except (ArithmeticError, ValueError, np.linalg.LinAlgError):
                    out[m] = None
        if boot:
            try:
                out.update(pb_tests(data, design, constraint, scenario.B, stream.child(2), boot, config))
            except (ArithmeticError, ValueError, np.linalg.LinAlgError):
                out.update({m: None for m in boot})
    return b, {
        m: (math.nan, math.nan, False) if r is None else (r.p_value, r.statistic, r.degenerate) for m, r in out.items()
    }


def run_scenario(scenario, config=TrustConfig(), workers=None):
    """Simulate ``scenario.n_sims`` datasets and test the setting's null with each method.

    Replicate ``b`` uses the stream ``(seed, b)``: child 0 draws the depths,
    child 1 the counts and child 2 the bootstrap replicates, so results are
    identical for any number of workers.
    """
    tasks = [(scenario, b, config) for b in range(scenario.n_sims)]
    if workers is None or workers <= 1:
        outs = [_one_replicate(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_one_replicate, tasks, chunksize=max(1, len(tasks) // (8 * workers))))
    outs.sort(key=lambda o: o[0])
    p_values, stats, degen, failures = {}, {}, {}, {}
    for m in scenario.methods:
        rows = [o[1][m] for o in outs]
        p_values[m] = np.array([r[0] for r in rows])
        stats[m] = np.array([r[1] for r in rows])
        degen[m] = np.array([r[2] for r in rows], dtype=bool)
        failures[m] = int(np.count_nonzero(np.isnan(p_values[m])))
    return SimReport(scenario, p_values, stats, degen, failures)


def power_curve(setting, n, scales, n_sims=300, method="lrt", B=200, seed=0, config=TrustConfig(), workers=None):
    """``[(c, rejection rate)]`` for S4 or S5 at each scale ``c``; each point uses stream id ``seed`` offset by its index."""
    if setting not in ("S4", "S5"):
        raise ValueError("power curves are defined for S4 and S5")
    points = []
    for j, c in enumerate(scales):
        sc = SimScenario(setting, n, n_sims, (method,), float(c), B, seed=seed + j)
        rep = run_scenario(sc, config, workers)
        points.append((float(c), rep.rejection_rates()[method]))
    return points
