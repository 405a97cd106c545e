"""Acceptance checks, one per criterion, each reporting a single PASS/FAIL line.

Run under pytest (lines appear in the "acceptance criteria" summary section)
or directly with ``python tests/test_acceptance.py``.
"""

import math
import os
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
from scipy import stats

from betabinreg.batch import CountTable, bh_adjust
from betabinreg.bootstrap import RngStream, pb_tests, sample_beta_binomial
from betabinreg.cli import write_counts
from betabinreg.inference import detect_separation, fit_pair, lr_statistic, lr_test, lrt_uninformative, wald_test
from betabinreg.model import ETA_CLAMP, Dataset, DesignPair, gradient, hessian, inv_link, link, log_likelihood, moments
from betabinreg.optimize import ConstraintSpec
from betabinreg.simulation import SimScenario, design_half_split, power_curve, run_scenario

SEED = 11
WORKERS = os.cpu_count() or 1
KS_CRIT_1000 = stats.kstwo.ppf(0.99, 1000)


def _single(w, m):
    return Dataset(np.array([w]), np.array([m])), DesignPair.intercept_only(1)


def _central(f, x, h=1e-6):
    out = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out.append((f(x + e) - f(x - e)) / (2 * h))
    return np.array(out)


def check_golden_values():
    data, design = _single(15, 2000)
    want = {(-3.0, -5.0): -8.481, (-1.0, -5.0): -9.816, (-2.0, -5.0): -9.251}
    got = {t: log_likelihood(np.array(t), data, design) for t in want}
    close = all(abs(got[t] - v) <= 1e-3 for t, v in want.items())
    chord = got[(-2.0, -5.0)] < 0.5 * (got[(-3.0, -5.0)] + got[(-1.0, -5.0)])
    vals = ", ".join(f"{got[t]:.3f} (want {v})" for t, v in want.items())
    return close and chord, f"logL at the three points = {vals}; midpoint below chord: {chord}"


def check_derivatives():
    rng = np.random.default_rng(SEED)
    worst_g = worst_h = 0.0
    for _ in range(100):
        n = int(rng.integers(5, 21))
        k, ks = int(rng.integers(0, 4)), int(rng.integers(0, 4))
        design = DesignPair(rng.normal(size=(n, k)), rng.normal(size=(n, ks)))
        M = rng.integers(1, 10_001, n)
        theta = np.concatenate([[rng.uniform(-6, 1)], rng.normal(0, 0.5, k), [rng.uniform(-6, 0)], rng.normal(0, 0.5, ks)])
        mu = inv_link(design.Z @ theta[: k + 1])
        data = Dataset(rng.binomial(M, mu), M)
        g = gradient(theta, data, design)
        H = hessian(theta, data, design)
        g_fd = _central(lambda t: log_likelihood(t, data, design), theta)
        H_fd = _central(lambda t: gradient(t, data, design), theta)
        worst_g = max(worst_g, np.abs(g - g_fd).max() / max(1.0, np.abs(g).max()))
        worst_h = max(worst_h, np.abs(H - H_fd).max() / max(1.0, np.abs(H).max()))
    ok = worst_g <= 1e-5 and worst_h <= 1e-4
    return ok, f"worst relative error: gradient {worst_g:.2e} (<= 1e-5), Hessian {worst_h:.2e} (<= 1e-4)"


def check_distribution():
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for M in (1, 5, 20, 50):
        for _ in range(20):
            theta = np.array([rng.uniform(-6, 4), rng.uniform(-8, 4)])
            total = math.fsum(math.exp(log_likelihood(theta, *_single(w, M))) for w in range(M + 1))
            worst = max(worst, abs(total - 1))
    uni = 0.0
    theta = np.array([0.0, math.log(0.5)])
    for M in (1, 5, 20, 50):
        for w in range(M + 1):
            uni = max(uni, abs(math.exp(log_likelihood(theta, *_single(w, M))) - 1 / (M + 1)))
    ok = worst <= 1e-10 and uni <= 1e-12
    return ok, f"max |sum pmf - 1| = {worst:.1e} (<= 1e-10); max |pmf - 1/(M+1)| at a1=a2=1 = {uni:.1e} (<= 1e-12)"


def check_sampler():
    rng = np.random.default_rng(SEED)
    size = 1_000_000
    design = DesignPair.intercept_only(size)
    fails = []
    zmax = 0.0
    for i in range(5):
        mu, phi, M = rng.uniform(0.01, 0.9), rng.uniform(0.001, 0.5), int(rng.integers(5, 60_000))
        theta = np.array([link(mu), link(phi)])
        W = sample_beta_binomial(theta, design, np.full(size, M), RngStream(SEED, (i,)))
        mean, var, _ = moments(theta, DesignPair.intercept_only(1), np.array([M]))
        d = W - W.mean()
        z_mean = (W.mean() - mean[0]) / math.sqrt(var[0] / size)
        z_var = (W.var(ddof=1) - var[0]) / math.sqrt((np.mean(d**4) - var[0] ** 2) / size)
        zmax = max(zmax, abs(z_mean), abs(z_var))
        if abs(z_mean) >= 3 or abs(z_var) >= 3:
            fails.append((round(mu, 3), round(phi, 3), M))
    M = 20
    theta = np.array([link(0.3), link(0.1)])
    W = sample_beta_binomial(theta, design, np.full(size, M), RngStream(SEED, (99,)))
    probs = np.array([math.exp(log_likelihood(theta, *_single(w, M))) for w in range(M + 1)])
    obs = np.bincount(W, minlength=M + 1)
    exp = probs * size
    keep = exp >= 5
    obs_k = np.r_[obs[keep], obs[~keep].sum()] if (~keep).any() else obs
    exp_k = np.r_[exp[keep], exp[~keep].sum()] if (~keep).any() else exp
    p_gof = stats.chisquare(obs_k, exp_k).pvalue
    ok = not fails and p_gof > 0.01
    return ok, f"max |z| over mean/variance of 5 triples = {zmax:.2f} (< 3); M=20 pmf chi-square p = {p_gof:.3f} (> 0.01)"


def check_degeneracy():
    design = design_half_split(12)
    x = design.X[:, 0]
    rng = np.random.default_rng(SEED)
    M = rng.integers(7821, 58656, 12)
    W = rng.binomial(M, 0.004)
    W[x == 0] = 0
    data = Dataset(W, M)
    con = ConstraintSpec.select(design, [3])
    separated = detect_separation(data, design, con)
    full, null = fit_pair(data, design, con)
    lrt = lr_test(full, null, 1, lrt_uninformative(design, con, separated))
    raw = lr_statistic(full, null)
    bound = 2 * M[x == 0].sum() * inv_link(-ETA_CLAMP)
    wald = wald_test(full, con, data.n, separated)
    pb = pb_tests(data, design, con, B=50, rng=RngStream(SEED))
    ok = (
        separated
        and lrt.statistic <= 1e-8
        and wald.statistic == 0.0
        and wald.degenerate
        and pb["pb_wald"].statistic == 0.0
        and pb["pb_wald"].degenerate
        and pb["pb_lrt"].statistic <= 1e-8
    )
    return ok, (
        f"reported LRT = {lrt.statistic:g} (<= 1e-8), raw 2*dlogL = {raw:.1e} (clamp bound {bound:.1e}); "
        f"wald stat {wald.statistic:g} degenerate={wald.degenerate}; pb_wald stat {pb['pb_wald'].statistic:g} "
        f"degenerate={pb['pb_wald'].degenerate}; pb_lrt p = {pb['pb_lrt'].p_value:g}"
    )


def check_type_one_error():
    parts, ok = [], True
    for setting in ("S1", "S2", "S3"):
        rep = run_scenario(SimScenario(setting, 30, 1000, ("wald", "lrt"), seed=SEED), workers=WORKERS)
        rates, ks = rep.rejection_rates(), rep.ks_statistics()
        for m in ("wald", "lrt"):
            good = 0.03 <= rates[m] <= 0.07 and ks[m] < KS_CRIT_1000
            ok &= good
            parts.append(f"{setting}/{m} rate {rates[m]:.3f} KS {ks[m]:.4f}{'' if good else ' *'}")
    return ok, "; ".join(parts) + f" (rate in [0.03, 0.07], KS < {KS_CRIT_1000:.4f})"


def check_bootstrap_calibration():
    rep = run_scenario(SimScenario("S1", 10, 500, ("wald", "lrt", "pb_wald", "pb_lrt"), B=200, seed=SEED), workers=WORKERS)
    r = rep.rejection_rates()
    ok = all(0.025 <= r[m] <= 0.08 for m in ("pb_wald", "pb_lrt")) and all(r[m] > 0.07 for m in ("wald", "lrt"))
    return ok, (
        f"pb_wald {r['pb_wald']:.3f}, pb_lrt {r['pb_lrt']:.3f} (in [0.025, 0.08]); "
        f"wald {r['wald']:.3f}, lrt {r['lrt']:.3f} (> 0.07)"
    )


def check_power_curve():
    n_sims = 300
    pts = power_curve("S4", 100, [0.0, 0.25, 0.5, 0.75, 1.0], n_sims=n_sims, method="lrt", seed=SEED, workers=WORKERS)
    power = [p for _, p in pts]
    drops_ok = True
    for a, b in zip(power, power[1:]):
        se = math.sqrt((a * (1 - a) + b * (1 - b)) / n_sims)
        drops_ok &= b >= a - 2 * se
    ok = abs(power[0] - 0.05) <= 0.03 and drops_ok and power[-1] > power[1]
    curve = ", ".join(f"c={c:g}: {p:.3f}" for c, p in pts)
    return ok, f"{curve} (c=0 within 0.05 +/- 0.03, no drop > 2 SE, c=1 above c=0.25)"


def _brute_bh(p):
    m = p.size
    rank = (p[None, :] <= p[:, None]).sum(axis=1)
    val = np.minimum(1.0, m * p / rank)
    return np.where(p[None, :] >= p[:, None], val[None, :], np.inf).min(axis=1)


def check_bh():
    rng = np.random.default_rng(SEED)
    mismatches = 0
    for _ in range(1000):
        m = int(rng.integers(1, 501))
        p = rng.uniform(0, 1, m)
        p[p == 0] = 1e-300
        mismatches += not np.array_equal(bh_adjust(p), _brute_bh(p))
    return mismatches == 0, f"{mismatches} of 1000 random vectors differ from the brute-force step-up values"


def _cli(*args):
    return subprocess.run([sys.executable, "-m", "betabinreg.cli", *args], capture_output=True, text=True)


def check_cli_determinism():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        n = 12
        design = design_half_split(n)
        M = np.random.default_rng(SEED).integers(7821, 58656, n)
        theta = [(-5.75, 0, -5.24, 0), (-5.17, -2.46, -5.13, -3.88), (-5.36, -1.12, -5.69, 0)]
        rows = [sample_beta_binomial(np.array(t), design, M, RngStream(SEED, (i,))) for i, t in enumerate(theta)]
        sids = [f"s{j}" for j in range(n)]
        write_counts(CountTable(["a", "b", "c"], sids, np.array(rows)), tmp / "counts.csv")
        grp = ["x" if v == 0 else "y" for v in design.X[:, 0]]
        (tmp / "meta.csv").write_text("sample,group\n" + "".join(f"{s},{g}\n" for s, g in zip(sids, grp)))
        runs = {
            "batch": lambda out, th: _cli("batch", "--counts", str(tmp / "counts.csv"), "--metadata", str(tmp / "meta.csv"), "--mu-covariates", "group", "--method", "pb_lrt", "--B", "1000", "--seed", "7", "--threads", th, "--out", str(out)),
            "simulate": lambda out, th: _cli("simulate", "--setting", "S1", "--n", "30", "--n-sims", "100", "--seed", "7", "--threads", th, "--out", str(out)),
        }
        same = {}
        for name, run in runs.items():
            blobs = []
            for i, th in enumerate(("1", "2", "1")):
                out = tmp / f"{name}{i}"
                proc = run(out, th)
                if proc.returncode != 0:
                    return False, f"{name} exited {proc.returncode}: {proc.stderr.strip()}"
                blobs.append(out.read_bytes())
            same[name] = blobs[0] == blobs[1] == blobs[2]
    ok = all(same.values())
    return ok, ", ".join(f"{k}: identical across 3 runs (threads 1/2/1) = {v}" for k, v in same.items())


CRITERIA = [
    (1, "log-likelihood golden values", check_golden_values),
    (2, "derivatives vs finite differences", check_derivatives),
    (3, "pmf normalization", check_distribution),
    (4, "sampler fidelity", check_sampler),
    (5, "all-zero group degeneracy", check_degeneracy),
    (6, "type I error at n=30", check_type_one_error),
    (7, "bootstrap calibration at n=10", check_bootstrap_calibration),
    (8, "power monotonicity", check_power_curve),
    (9, "BH brute-force equivalence", check_bh),
    (10, "CLI determinism", check_cli_determinism),
]


def _line(number, title, ok, detail, seconds):
    return f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} [{seconds:.1f}s] {detail}"


def _run(number, title, check, record):
    start = time.perf_counter()
    ok, detail = check()
    line = _line(number, title, ok, detail, time.perf_counter() - start)
    record("acceptance", line)
    print(line)
    assert ok, line


def test_criterion_01_golden_values(record_property):
    _run(*CRITERIA[0], record_property)


def test_criterion_02_derivatives(record_property):
    _run(*CRITERIA[1], record_property)


def test_criterion_03_distribution(record_property):
    _run(*CRITERIA[2], record_property)


def test_criterion_04_sampler(record_property):
    _run(*CRITERIA[3], record_property)


def test_criterion_05_degeneracy(record_property):
    _run(*CRITERIA[4], record_property)


def test_criterion_06_type_one_error(record_property):
    _run(*CRITERIA[5], record_property)


def test_criterion_07_bootstrap_calibration(record_property):
    _run(*CRITERIA[6], record_property)


def test_criterion_08_power(record_property):
    _run(*CRITERIA[7], record_property)


def test_criterion_09_bh(record_property):
    _run(*CRITERIA[8], record_property)


def test_criterion_10_cli_determinism(record_property):
    _run(*CRITERIA[9], record_property)


if __name__ == "__main__":
    failed = 0
    for number, title, check in CRITERIA:
        start = time.perf_counter()
        ok, detail = check()
        failed += not ok
        print(_line(number, title, ok, detail, time.perf_counter() - start), flush=True)
    sys.exit(1 if failed else 0)
