import numpy as np
import pytest
from scipy import stats

from betabinreg.batch import CountTable, bh_adjust, fdr_curve, filter_taxa, run_batch, test_taxon
from betabinreg.bootstrap import RngStream, sample_beta_binomial
from betabinreg.simulation import default_depth_pool, design_half_split, draw_depths, setting_theta


def brute_force_bh(p):
    # q_i = min over j with p_j >= p_i of min(1, m p_j / rank_j), rank_j = #{k : p_k <= p_j}
    p = np.asarray(p, dtype=float)
    m = p.size
    rank = (p[None, :] <= p[:, None]).sum(axis=1)
    val = np.minimum(1.0, m * p / rank)
    mask = p[None, :] >= p[:, None]
    return np.where(mask, val[None, :], np.inf).min(axis=1)


def random_table(n_taxa, n, seed, zero_rows=()):
    rng = np.random.default_rng(seed)
    counts = rng.poisson(rng.uniform(1, 200, size=(n_taxa, 1)), size=(n_taxa, n))
    for r in zero_rows:
        counts[r] = 0
    return CountTable([f"t{i}" for i in range(n_taxa)], [f"s{j}" for j in range(n)], counts)


def test_bh_examples():
    np.testing.assert_array_equal(bh_adjust([0.01, 0.02, 0.03]), [0.03, 0.03, 0.03])
    np.testing.assert_array_equal(bh_adjust([1.0, 1.0, 1.0]), [1.0, 1.0, 1.0])
    assert bh_adjust([0.2])[0] == 0.2
    assert bh_adjust([]).size == 0


def test_bh_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        m = int(rng.integers(1, 501))
        p = rng.uniform(0, 1, m)
        p[p == 0] = 1e-300
        if rng.random() < 0.3:
            # force ties
            p = np.round(p, 2) * 0.99 + 0.005
        np.testing.assert_array_equal(bh_adjust(p), brute_force_bh(p))


def test_bh_properties():
    rng = np.random.default_rng(1)
    p = rng.beta(0.3, 1, 200) + 1e-12
    q = bh_adjust(p)
    assert np.all(q >= p) and np.all(q <= 1)
    order = np.argsort(p)
    assert np.all(np.diff(q[order]) >= 0)


@pytest.mark.parametrize("bad", [[0.0], [1.2], [np.nan], [[0.1]]])
def test_bh_rejects_invalid(bad):
    with pytest.raises(ValueError):
        bh_adjust(bad)


def test_fdr_curve():
    assert fdr_curve([0.01, 0.04, 0.2]) == [(0.01, 1), (0.04, 2), (0.2, 3)]
    assert fdr_curve([]) == []
    assert fdr_curve([0.3, 0.1, 0.1]) == [(0.1, 2), (0.3, 3)]


def test_filter_taxa():
    table = random_table(5, 6, 0, zero_rows=(2,))
    kept, skipped = filter_taxa(table)
    assert kept.taxa == ("t0", "t1", "t3", "t4")
    assert skipped == [("t2", "all counts zero")]
    np.testing.assert_array_equal(kept.depths, table.depths)
    same, none = filter_taxa(random_table(4, 6, 1))
    assert same == random_table(4, 6, 1) and none == []


def test_filter_taxa_counts():
    table = random_table(241, 31, 2, zero_rows=range(0, 241, 19)[:13])
    kept, skipped = filter_taxa(table)
    assert kept.n_taxa == 228 and len(skipped) == 13


def test_count_table_validation():
    with pytest.raises(ValueError):
        CountTable(["a", "a"], ["s"], np.array([[1], [2]]))
    with pytest.raises(ValueError):
        CountTable(["a"], ["s", "s"], np.array([[1, 2]]))
    with pytest.raises(ValueError):
        CountTable(["a"], ["s"], np.array([[-1]]))
    with pytest.raises(ValueError):
        CountTable(["a"], ["s"], np.array([[1.5]]))
    t = CountTable(["a", "b"], ["x", "y"], np.array([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(t.depths, [4, 6])


def simulated_taxon(setting, n, seed, c=1.0):
    design = design_half_split(n)
    s = RngStream(seed, 0)
    M = draw_depths(default_depth_pool(), n, s.child(0))
    return sample_beta_binomial(setting_theta(setting, c), design, M, s.child(1)), M, design


def test_zero_group_taxon_dv_degenerate():
    design = design_half_split(10)
    M = np.full(10, 30000)
    W = np.where(design.X[:, 0] == 0, 0, 90)
    for method in ("wald", "lrt"):
        da, dv, _ = test_taxon(W, M, design, method)
        assert dv.degenerate and dv.p_value == 1.0 and dv.statistic == 0.0


def test_taxon_power_under_both_effects():
    hits = 0
    reps = 20
    for rep in range(reps):
        W, M, design = simulated_taxon("S4", 100, 300 + rep)
        da, dv, ok = test_taxon(W, M, design, "lrt")
        hits += da.p_value < 0.05 and dv.p_value < 0.05
    assert hits / reps >= 0.9


def test_taxon_null_pvalues_uniform():
    ps = []
    for rep in range(150):
        W, M, design = simulated_taxon("S1", 100, 700 + rep)
        da, dv, _ = test_taxon(W, M, design, "lrt")
        ps += [da.p_value, dv.p_value]
    assert stats.kstest(ps[::2], "uniform").pvalue > 0.01
    assert stats.kstest(ps[1::2], "uniform").pvalue > 0.01


def test_run_batch_order_and_workers():
    design = design_half_split(10)
    table = random_table(6, 10, 3, zero_rows=(4,))
    a = run_batch(table, design, "wald", seed=5)
    b = run_batch(table, design, "wald", seed=5, workers=2)
    assert a.to_rows() == b.to_rows()
    assert [r.taxon for r in a.records] == ["t0", "t1", "t2", "t3", "t5"]
    assert a.skipped == [("t4", "all counts zero")]
    q = np.array([r.q_da for r in a.records])
    np.testing.assert_array_equal(q, bh_adjust([r.p_da for r in a.records]))


def test_run_batch_bootstrap_streams_by_index():
    design = design_half_split(6)
    table = random_table(3, 6, 4)
    full = run_batch(table, design, "pb_lrt", B=10, seed=1)
    # dropping a taxon leaves the others' bootstrap p-values unchanged
    sub = CountTable(table.taxa, table.sample_ids, np.vstack([table.counts[:1], np.zeros((1, 6), int), table.counts[2:]]), table.depths)
    part = run_batch(sub, design, "pb_lrt", B=10, seed=1)
    assert [r.p_da for r in part.records] == [full.records[0].p_da, full.records[2].p_da]


def test_run_batch_skips_failures(monkeypatch):
    import betabinreg.batch as batch

    design = design_half_split(6)
    table = random_table(3, 6, 5)
    real = batch.test_taxon

    def flaky(counts, *args, **kw):
        if np.array_equal(counts, table.counts[1]):
            raise ArithmeticError("model fit did not converge")
        return real(counts, *args, **kw)

    monkeypatch.setattr(batch, "test_taxon", flaky)
    res = run_batch(table, design, "wald")
    assert [r.taxon for r in res.records] == ["t0", "t2"]
    assert res.skipped == [("t1", "ArithmeticError: model fit did not converge")]
    with pytest.raises(ValueError):
        run_batch(table, design_half_split(8))
