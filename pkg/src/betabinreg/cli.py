"""Command-line interface: ``fit``, ``test``, ``batch`` and ``simulate``.

Counts CSV: header ``taxon,<sample ids>``, one integer row per taxon.
Metadata CSV: header ``sample,<covariates>``, one row per sample.  Samples are
matched by id; two-level string columns are coded 0/1 in sorted level order.
"""

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from .batch import CountTable, run_batch, test_taxon
from .bootstrap import DEFAULT_B, RngStream
from .inference import METHODS
from .model import Dataset, DesignPair
from .optimize import TrustConfig, fit
from .simulation import SETTINGS, SimScenario, run_scenario

__all__ = [
    "IngestError",
    "MissingIdError",
    "DuplicateIdError",
    "CountFormatError",
    "NegativeCountError",
    "read_counts",
    "write_counts",
    "read_metadata",
    "build_design",
    "ingest",
    "main",
]


class IngestError(ValueError):
    pass


class MissingIdError(IngestError):
    pass


class DuplicateIdError(IngestError):
    pass


class CountFormatError(IngestError):
    pass


class NegativeCountError(IngestError):
    pass


def _duplicates(ids):
    seen, dup = set(), []
    for i in ids:
        if i in seen:
            dup.append(i)
        seen.add(i)
    return dup


def read_counts(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or len(rows[0]) < 2:
        raise CountFormatError(f"{path}: expected a header 'taxon,<sample ids...>'")
    samples = [s.strip() for s in rows[0][1:]]
    dup = _duplicates(samples)
    if dup:
        raise DuplicateIdError(f"{path}: duplicate sample id {dup[0]!r}")
    taxa, counts = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(samples) + 1:
            raise CountFormatError(f"{path}:{lineno}: expected {len(samples) + 1} fields, got {len(row)}")
        values = []
        for s, cell in zip(samples, row[1:]):
            cell = cell.strip()
            try:
                v = int(cell)
            except ValueError:
                raise CountFormatError(f"{path}:{lineno}: count {cell!r} for sample {s!r} is not an integer") from None
            if v < 0:
                raise NegativeCountError(f"{path}:{lineno}: negative count {v} for sample {s!r}")
            values.append(v)
        taxa.append(row[0].strip())
        counts.append(values)
    dup = _duplicates(taxa)
    if dup:
        raise DuplicateIdError(f"{path}: duplicate taxon id {dup[0]!r}")
    return CountTable(taxa, samples, np.array(counts, dtype=np.int64).reshape(len(taxa), len(samples)))


def write_counts(table, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["taxon", *table.sample_ids])
        for t, row in zip(table.taxa, table.counts):
            w.writerow([t, *(int(v) for v in row)])


def read_metadata(path):
    """Return ``{sample: {column: raw string}}`` and the column names."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or len(rows[0]) < 1:
        raise IngestError(f"{path}: empty metadata file")
    columns = [c.strip() for c in rows[0][1:]]
    meta = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(columns) + 1:
            raise IngestError(f"{path}:{lineno}: expected {len(columns) + 1} fields, got {len(row)}")
        sid = row[0].strip()
        if sid in meta:
            raise DuplicateIdError(f"{path}: duplicate sample id {sid!r}")
        meta[sid] = dict(zip(columns, (c.strip() for c in row[1:])))
    return meta, columns


def _code_column(name, values):
    try:
        return np.array([float(v) for v in values])
    except ValueError:
        pass
    levels = sorted(set(values))
    if len(levels) != 2:
        raise IngestError(f"covariate {name!r} is neither numeric nor two-level ({len(levels)} levels)")
    return np.array([float(levels.index(v)) for v in values])


def build_design(meta, columns, sample_ids, mu_cols, phi_cols):
    missing = [s for s in sample_ids if s not in meta]
    if missing:
        raise MissingIdError(f"sample {missing[0]!r} is in the counts file but not in the metadata")
    for c in (*mu_cols, *phi_cols):
        if c not in columns:
            raise IngestError(f"covariate {c!r} not found in metadata columns {columns}")

    def matrix(cols):
        if not cols:
            return np.zeros((len(sample_ids), 0))
        return np.column_stack([_code_column(c, [meta[s][c] for s in sample_ids]) for c in cols])

    return DesignPair(matrix(mu_cols), matrix(phi_cols))


def ingest(counts_path, metadata_path, mu_cols=(), phi_cols=()):
    table = read_counts(counts_path)
    meta, columns = read_metadata(metadata_path)
    return table, build_design(meta, columns, table.sample_ids, list(mu_cols), list(phi_cols))


def _columns(arg):
    if arg is None:
        return []
    return [c.strip() for c in arg.split(",") if c.strip()]


def _num(x):
    x = float(x)
    return None if math.isnan(x) else x


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _fmt(v):
    if isinstance(v, bool) or isinstance(v, np.bool_):
        return "true" if v else "false"
    if isinstance(v, float | np.floating):
        return format(float(v), ".17g")
    return str(v)


def _write_csv(header, rows, path):
    fh = sys.stdout if path is None or path == "-" else open(path, "w", newline="")
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])
    finally:
        if fh is not sys.stdout:
            fh.close()


def _emit(records, header, args):
    if args.format == "csv":
        _write_csv(header, records, args.out)
    else:
        clean = [{k: (_num(v) if isinstance(v, float) else v) for k, v in r.items()} for r in records]
        _write_json(clean, args.out)


def _load(args):
    mu = _columns(args.mu_covariates)
    phi = _columns(args.phi_covariates) if args.phi_covariates is not None else mu
    return ingest(args.counts, args.metadata, mu, phi)


def _taxon_row(table, taxon):
    if taxon is None:
        if table.n_taxa != 1:
            raise IngestError("--taxon is required when the counts file has more than one taxon")
        return 0
    if taxon not in table.taxa:
        raise MissingIdError(f"taxon {taxon!r} not found in the counts file")
    return table.taxa.index(taxon)


def _cmd_fit(args):
    table, design = _load(args)
    j = _taxon_row(table, args.taxon)
    res = fit(Dataset(table.counts[j], table.depths), design, TrustConfig(n_starts=args.starts))
    names = ["beta0", *(f"beta{i}" for i in range(1, design.k + 1)), "beta0_star"]
    names += [f"beta{i}_star" for i in range(1, design.kstar + 1)]
    rec = {
        "taxon": table.taxa[j],
        "theta_hat": {n: float(v) for n, v in zip(names, res.theta_hat)},
        "loglik": float(res.loglik),
        "converged": bool(res.converged),
        "boundary": bool(res.boundary_flag),
        "iterations": int(res.iterations),
        "grad_norm": float(res.grad_norm),
        "n_starts": int(res.n_starts_used),
    }
    if args.format == "csv":
        rows = [{"parameter": n, "estimate": v} for n, v in rec["theta_hat"].items()]
        rows += [{"parameter": "loglik", "estimate": rec["loglik"]}]
        _write_csv(["parameter", "estimate"], rows, args.out)
    else:
        _write_json(rec, args.out)
    return 0


def _cmd_test(args):
    table, design = _load(args)
    j = _taxon_row(table, args.taxon)
    da, dv, converged = test_taxon(
        table.counts[j], table.depths, design, args.method, args.B, RngStream(args.seed, (j,)), workers=args.threads
    )
    rows = []
    for name, res in (("da", da), ("dv", dv)):
        if args.null in (name, "both"):
            rows.append(
                {
                    "taxon": table.taxa[j],
                    "hypothesis": name,
                    "method": res.method,
                    "statistic": float(res.statistic),
                    "df": int(res.df),
                    "p_value": float(res.p_value),
                    "degenerate": bool(res.degenerate),
                    "converged": converged,
                }
            )
    _emit(rows, ["taxon", "hypothesis", "method", "statistic", "df", "p_value", "degenerate", "converged"], args)
    return 0


def _cmd_batch(args):
    table, design = _load(args)
    res = run_batch(table, design, args.method, args.B, args.seed, workers=args.threads)
    for taxon, reason in res.skipped:
        print(f"skipped {taxon}: {reason}", file=sys.stderr)
    header = ["taxon", "p_da", "p_dv", "q_da", "q_dv", "degenerate_da", "degenerate_dv", "converged"]
    _emit(res.to_rows(), header, args)
    return 0


def _read_depths(path):
    with open(path) as fh:
        vals = [line.strip() for line in fh if line.strip()]
    try:
        return [int(v) for v in vals]
    except ValueError:
        raise IngestError(f"{path}: depths must be integers, one per line") from None


def _cmd_simulate(args):
    methods = tuple(_columns(args.method))
    pool = _read_depths(args.depths) if args.depths else None
    sc = SimScenario(
        args.setting,
        args.n,
        args.n_sims,
        methods,
        args.scale_c,
        args.B,
        pool,
        args.seed,
        not args.fixed_depths,
    )
    rep = run_scenario(sc, workers=args.threads)
    if args.format == "json":
        _write_json(_clean(rep.summary()), args.out)
    else:
        if args.out in (None, "-"):
            raise IngestError("simulate --format csv needs --out PATH")
        rep.write_csv(args.out)
    if args.summary:
        _write_json(_clean(rep.summary()), args.summary)
    return 0


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, list | tuple):
        return [_clean(v) for v in obj]
    if isinstance(obj, float):
        return _num(obj)
    return obj


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="betabinreg", description="Beta-binomial regression for microbiome counts.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, method=True):
        if data:
            sp.add_argument("--counts", required=True, help="counts CSV (taxon,<sample ids...>)")
            sp.add_argument("--metadata", required=True, help="metadata CSV (sample,<covariates...>)")
            sp.add_argument("--mu-covariates", default="", help="comma-separated columns for the mean model")
            sp.add_argument(
                "--phi-covariates", default=None, help="comma-separated columns for the dispersion model (default: same as mean)"
            )
        if method:
            sp.add_argument("--method", default="lrt", choices=METHODS)
            sp.add_argument("--B", type=_positive_int, default=DEFAULT_B, help="bootstrap replicates")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1)
        sp.add_argument("--out", default=None, help="output path (default: stdout)")
        sp.add_argument("--format", choices=("json", "csv"), default="json")

    sp = sub.add_parser("fit", help="fit one taxon")
    common(sp, method=False)
    sp.add_argument("--taxon")
    sp.add_argument("--starts", type=_positive_int, default=TrustConfig().n_starts)
    sp.set_defaults(func=_cmd_fit)

    sp = sub.add_parser("test", help="test one taxon for differential abundance / variability")
    common(sp)
    sp.add_argument("--taxon")
    sp.add_argument("--null", choices=("da", "dv", "both"), default="both")
    sp.set_defaults(func=_cmd_test)

    sp = sub.add_parser("batch", help="test every taxon and BH-adjust")
    common(sp)
    sp.set_defaults(func=_cmd_batch)

    sp = sub.add_parser("simulate", help="Type I error / power simulation")
    common(sp, data=False, method=False)
    sp.add_argument("--setting", required=True, choices=sorted(SETTINGS))
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--n-sims", type=_positive_int, default=1000)
    sp.add_argument("--scale-c", type=float, default=1.0)
    sp.add_argument("--method", default="wald,lrt", help="comma-separated subset of " + ",".join(METHODS))
    sp.add_argument("--B", type=_positive_int, default=200)
    sp.add_argument("--depths", help="file of sequencing depths to resample, one per line")
    sp.add_argument("--fixed-depths", action="store_true", help="draw one depth vector for all replicates")
    sp.add_argument("--summary", help="also write the JSON summary here")
    sp.set_defaults(func=_cmd_simulate, format="csv")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
