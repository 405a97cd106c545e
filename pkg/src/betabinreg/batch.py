"""Per-taxon differential abundance / variability testing with Benjamini-Hochberg adjustment.

Differential abundance (DA) tests that every mean slope is zero; differential
variability (DV) tests that every dispersion slope is zero.  Each taxon is an
independent task with its own random stream ``(seed, taxon index)``, so output
does not depend on processing order or on the number of workers.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import math
import warnings

import numpy as np

from .bootstrap import DEFAULT_B, RngStream, pb_tests
from .inference import METHODS, detect_separation, fit_pair, lr_test, lrt_uninformative, wald_test
from .model import Dataset
from .optimize import ConstraintSpec, TrustConfig

__all__ = [
    "CountTable",
    "TaxonResult",
    "BatchResult",
    "filter_taxa",
    "test_taxon",
    "bh_adjust",
    "fdr_curve",
    "run_batch",
]


def _check_unique(name, ids):
    seen = set()
    for i in ids:
        if i in seen:
            raise ValueError(f"duplicate {name} id {i!r}")
        seen.add(i)


@dataclass(frozen=True)
class CountTable:
    """Taxa by samples count matrix.

    ``depths`` are the per-sample totals over every taxon in the table as
    given; :func:`filter_taxa` carries them over unchanged.
    """

    taxa: tuple
    sample_ids: tuple
    counts: np.ndarray
    depths: np.ndarray = None

    def __post_init__(self):
        taxa = tuple(str(t) for t in self.taxa)
        samples = tuple(str(s) for s in self.sample_ids)
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape != (len(taxa), len(samples)):
            raise ValueError(f"counts must have shape ({len(taxa)}, {len(samples)}), got {counts.shape}")
        if counts.size and not np.issubdtype(counts.dtype, np.integer):
            if not np.all(np.isfinite(counts)) or np.any(counts != np.round(counts)):
                raise ValueError("counts must be integers")
        counts = counts.astype(np.int64)
        if np.any(counts < 0):
            raise ValueError("counts must be nonnegative")
        _check_unique("taxon", taxa)
        _check_unique("sample", samples)
        depths = counts.sum(axis=0) if self.depths is None else np.asarray(self.depths, dtype=np.int64)
        if depths.shape != (len(samples),):
            raise ValueError("depths must have one entry per sample")
        object.__setattr__(self, "taxa", taxa)
        object.__setattr__(self, "sample_ids", samples)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "depths", depths)

    @property
    def n_taxa(self):
        return len(self.taxa)

    @property
    def n_samples(self):
        return len(self.sample_ids)

    def __eq__(self, other):
        if not isinstance(other, CountTable):
            return NotImplemented
        return (
            self.taxa == other.taxa
            and self.sample_ids == other.sample_ids
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.depths, other.depths)
        )

    __hash__ = None


def filter_taxa(table):
    """Drop taxa whose counts are zero in every sample.

    Returns ``(filtered_table, skipped)`` where ``skipped`` lists
    ``(taxon, reason)`` pairs.
    """
    keep = table.counts.sum(axis=1) > 0
    skipped = [(t, "all counts zero") for t, k in zip(table.taxa, keep) if not k]
    filtered = CountTable(
        taxa=tuple(t for t, k in zip(table.taxa, keep) if k),
        sample_ids=table.sample_ids,
        counts=table.counts[keep],
        depths=table.depths,
    )
    return filtered, skipped


@dataclass
class TaxonResult:
    taxon: str
    p_da: float
    p_dv: float
    degenerate_da: bool
    degenerate_dv: bool
    converged: bool
    stat_da: float
    stat_dv: float
    q_da: float = math.nan
    q_dv: float = math.nan


@dataclass
class BatchResult:
    method: str
    records: list
    skipped: list = field(default_factory=list)

    def to_rows(self):
        keys = ("taxon", "p_da", "p_dv", "q_da", "q_dv", "degenerate_da", "degenerate_dv", "converged")
        return [{k: getattr(r, k) for k in keys} for r in self.records]


def _run_method(method, data, design, constraint, B, rng, config, workers):
    separated = detect_separation(data, design, constraint)
    if method in ("pb_wald", "pb_lrt"):
        res = pb_tests(data, design, constraint, B, rng, (method,), config, workers)[method]
        return res, True
    full, null = fit_pair(data, design, constraint, config)
    if method == "wald":
        return wald_test(full, constraint, data.n, separated), full.converged or full.boundary_flag
    ok = (full.converged or full.boundary_flag) and (null.converged or null.boundary_flag)
    if not ok:
        raise ArithmeticError("model fit did not converge")
    return lr_test(full, null, constraint.r, lrt_uninformative(design, constraint, separated)), True


def test_taxon(counts, depths, design, method="lrt", B=DEFAULT_B, rng=None, config=TrustConfig(), workers=None):
    """Run the DA and DV tests for one taxon.

    Returns ``(da, dv, converged)`` with two :class:`TestResult` objects.  The
    DA and DV bootstraps use children 0 and 1 of ``rng``.  Fit failures raise.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    if design.k == 0 or design.kstar == 0:
        raise ValueError("DA and DV tests need at least one covariate in each submodel")
    if rng is None:
        rng = RngStream(0)
    data = Dataset(counts, depths)
    da_c = ConstraintSpec.select(design, design.mean_slope_index())
    dv_c = ConstraintSpec.select(design, design.dispersion_slope_index())
    da, ok_da = _run_method(method, data, design, da_c, B, rng.child(0), config, workers)
    dv, ok_dv = _run_method(method, data, design, dv_c, B, rng.child(1), config, workers)
    return da, dv, bool(ok_da and ok_dv)


test_taxon.__test__ = False


def bh_adjust(p):
    """Benjamini-Hochberg step-up adjusted p-values, returned in input order."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise ValueError("p must be a vector")
    if np.any(~(p > 0)) or np.any(p > 1):
        raise ValueError("p-values must lie in (0, 1]")
    m = p.size
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    ranked = np.minimum(1.0, m * p[order] / np.arange(1, m + 1))
    ranked = np.minimum.accumulate(ranked[::-1])[::-1]
    q = np.empty(m)
    q[order] = ranked
    return q


def fdr_curve(q):
    """``[(threshold, number of q <= threshold)]`` over the distinct q-values, ascending."""
    q = np.sort(np.asarray(q, dtype=float))
    values, counts = np.unique(q, return_counts=True)
    return list(zip(values.tolist(), np.cumsum(counts).tolist()))


def _taxon_task(task):
    idx, taxon, counts, depths, design, method, B, seed, config = task
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            da, dv, converged = test_taxon(counts, depths, design, method, B, RngStream(seed, (idx,)), config)
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        return idx, taxon, None, f"{type(exc).__name__}: {exc}"
    rec = TaxonResult(
        taxon=taxon,
        p_da=da.p_value,
        p_dv=dv.p_value,
        degenerate_da=da.degenerate,
        degenerate_dv=dv.degenerate,
        converged=converged,
        stat_da=da.statistic,
        stat_dv=dv.statistic,
    )
    return idx, taxon, rec, None


def run_batch(table, design, method="lrt", B=DEFAULT_B, seed=0, config=TrustConfig(), workers=None, filter_zero=True):
    """Test every taxon of ``table`` and BH-adjust the DA and DV p-values separately.

    Taxon ``i`` (its position in the unfiltered table) uses the random stream
    ``(seed, i)``.  Taxa whose fits fail are listed in ``skipped``.
    """
    if design.n != table.n_samples:
        raise ValueError(f"design has {design.n} rows, table has {table.n_samples} samples")
    skipped = []
    index = {t: i for i, t in enumerate(table.taxa)}
    if filter_zero:
        table, skipped = filter_taxa(table)
    tasks = [
        (index[t], t, table.counts[j], table.depths, design, method, B, seed, config) for j, t in enumerate(table.taxa)
    ]
    if workers is None or workers <= 1 or len(tasks) < 2:
        outs = [_taxon_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_taxon_task, tasks))
    outs.sort(key=lambda o: o[0])
    records = []
    for _, taxon, rec, err in outs:
        if rec is None:
            skipped.append((taxon, err))
        else:
            records.append(rec)
    if records:
        q_da = bh_adjust([r.p_da for r in records])
        q_dv = bh_adjust([r.p_dv for r in records])
        for r, a, v in zip(records, q_da, q_dv):
            r.q_da, r.q_dv = float(a), float(v)
    skipped.sort(key=lambda s: index[s[0]])
    return BatchResult(method=method, records=records, skipped=skipped)

