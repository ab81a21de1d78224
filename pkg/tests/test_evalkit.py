
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import cell_balance, enumerate_p

from meshvox.evalkit import (
    DEFAULT_CUTOFFS,
    ScoreTable,
    SplitPlan,
    StrataSpec,
    StratumClampWarning,
    SubjectRecord,
    compare_models,
    format_table,
    holm,
    make_splits,
    rows_to_csv,
    stratum_of,
    wilcoxon_signed_rank,
)


def roster(n=224, seed=0):
    rng = np.random.default_rng(seed)
    lo, hi = DEFAULT_CUTOFFS[0] + 1, DEFAULT_CUTOFFS[-1]
    return [
        SubjectRecord(f"s{i:03d}", int(rng.integers(lo, hi + 1)), ("A", "B")[int(rng.integers(2))]) for i in range(n)
    ]


# -- strata --------------------------------------------------------------------


@pytest.mark.parametrize("vol,expected", [(33619, 1), (33620, 2), (50000, 2), (67891, 2), (363885, 4), (204, 1)])
def test_stratum_boundaries(vol, expected):
    assert stratum_of(vol) == expected


def test_stratum_clamp_warns():
    with pytest.warns(StratumClampWarning):
        assert stratum_of(10) == 1
    with pytest.warns(StratumClampWarning):
        assert stratum_of(10**7) == 4


def test_strata_spec_validation():
    with pytest.raises(ValueError):
        StrataSpec((5, 5, 10))


# -- splits --------------------------------------------------------------------


def test_nine_subjects_single_cell():
    recs = [SubjectRecord(f"s{i}", 1000) for i in range(9)]
    plan = make_splits(recs, 3, 3, seed=1)
    assert [len(te) for _, te in plan.outer_folds] == [3, 3, 3]


def check_plan(plan, recs):
    ids = {r.subject_id for r in recs}
    tests = [sid for _, te in plan.outer_folds for sid in te]
    assert sorted(tests) == sorted(ids)
    for (train, test), inner in zip(plan.outer_folds, plan.inner_folds):
        assert not set(train) & set(test)
        assert set(train) | set(test) == ids
        vals = [sid for _, va in inner for sid in va]
        assert sorted(vals) == sorted(train)
        for itr, iva in inner:
            assert not set(itr) & set(iva)
            assert set(itr) | set(iva) == set(train)


def test_roster_224_balance():
    recs = roster()
    plan = make_splits(recs, 3, 3, seed=0)
    check_plan(plan, recs)
    assert cell_balance([te for _, te in plan.outer_folds], recs, 3) <= 1
    by_id = {r.subject_id: r for r in recs}
    for (train, _), inner in zip(plan.outer_folds, plan.inner_folds):
        assert cell_balance([va for _, va in inner], [by_id[s] for s in train], 3) <= 1


def test_splits_deterministic_and_json_roundtrip():
    recs = roster(60, seed=3)
    a = make_splits(recs, seed=5)
    b = make_splits(recs, seed=5)
    assert a.to_json() == b.to_json()
    c = SplitPlan.from_json(a.to_json())
    assert c.outer_folds == a.outer_folds and c.inner_folds == a.inner_folds


def test_splits_reject_duplicates():
    with pytest.raises(ValueError):
        make_splits([SubjectRecord("a", 500), SubjectRecord("a", 600)])


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 80), st.integers(0, 1000), st.integers(2, 4), st.integers(2, 4))
def test_split_invariants(n, seed, n_outer, n_inner):
    recs = roster(n, seed)
    plan = make_splits(recs, n_outer, n_inner, seed=seed)
    check_plan(plan, recs)
    assert cell_balance([te for _, te in plan.outer_folds], recs, n_outer) <= 1


# -- Wilcoxon ------------------------------------------------------------------


def test_wilcoxon_identical_samples():
    r = wilcoxon_signed_rank([1, 2, 3], [1, 2, 3])
    assert r.p_value == 1.0 and r.degenerate


def test_wilcoxon_n5_all_positive():
    r = wilcoxon_signed_rank([1.1, 2.2, 3.3, 4.4, 5.5], [0, 0, 0, 0, 0])
    assert r.p_value == 0.0625
    assert r.method == "exact" and r.statistic == 15


def test_wilcoxon_n8_matches_enumeration():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=8), rng.normal(size=8)
    assert abs(wilcoxon_signed_rank(a, b).p_value - enumerate_p(a - b)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-4, 4), min_size=1, max_size=12))
def test_wilcoxon_exact_equals_enumeration(diffs):
    # small integer differences give plenty of ties and zeros
    d = np.array(diffs, dtype=float)
    r = wilcoxon_signed_rank(d, np.zeros_like(d), mode="exact")
    if np.all(d == 0):
        assert r.degenerate and r.p_value == 1.0
    else:
        assert r.p_value == enumerate_p(d)


def test_wilcoxon_normal_mode_matches_scipy():
    from scipy.stats import wilcoxon

    rng = np.random.default_rng(4)
    for zero_method in ("wilcox", "pratt"):
        for _ in range(10):
            a = rng.integers(0, 8, 40).astype(float)
            b = rng.integers(0, 8, 40).astype(float)
            ours = wilcoxon_signed_rank(a, b, mode="normal", zero_method=zero_method).p_value
            ref = wilcoxon(a, b, zero_method=zero_method, correction=True, method="approx").pvalue
            assert ours == pytest.approx(ref, rel=1e-10)


def test_wilcoxon_exact_matches_scipy_without_ties():
    from scipy.stats import wilcoxon

    rng = np.random.default_rng(5)
    for n in range(1, 16):
        a, b = rng.normal(size=n), rng.normal(size=n)
        assert wilcoxon_signed_rank(a, b).p_value == pytest.approx(wilcoxon(a, b, method="exact").pvalue, rel=1e-12)


def test_wilcoxon_auto_switches_to_normal():
    rng = np.random.default_rng(0)
    assert wilcoxon_signed_rank(rng.normal(size=25), rng.normal(size=25)).method == "normal"


def test_wilcoxon_bad_input():
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1, 2], [1])
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1, 2], [0, 0], zero_method="zsplit")


# -- Holm ----------------------------------------------------------------------


def test_holm_example():
    adjusted, reject = holm([0.01, 0.04, 0.03], 0.05)
    assert adjusted == [0.03, 0.06, 0.06]
    assert reject == [True, False, False]


def test_holm_trivial_cases():
    assert holm([0.02])[0] == [0.02]
    adjusted, reject = holm([1.0, 1.0, 1.0])
    assert adjusted == [1.0, 1.0, 1.0] and not any(reject)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=15))
def test_holm_monotone_and_dominating(p):
    adjusted, _ = holm(p)
    order = np.argsort(p, kind="mergesort")
    sorted_adj = [adjusted[i] for i in order]
    assert all(x <= y for x, y in zip(sorted_adj, sorted_adj[1:]))
    assert all(q >= r for q, r in zip(adjusted, p))
    assert all(q <= 1.0 for q in adjusted)


# -- model comparison ----------------------------------------------------------


def make_table(n=9):
    rng = np.random.default_rng(1)
    table = ScoreTable()
    base = rng.uniform(0.6, 0.9, n)
    for i in range(n):
        sid = f"s{i}"
        table.add(sid, "base", dice=base[i], avd=0.2 + 0.01 * i, mcc=base[i] - 0.02)
        table.add(sid, "worse", dice=base[i] - 0.3, avd=0.6 + 0.01 * i, mcc=base[i] - 0.35)
        table.add(sid, "twin_a", dice=base[i] + 0.01 * (i - 4), avd=0.2, mcc=base[i])
        table.add(sid, "twin_b", dice=base[i] + 0.01 * (i - 4), avd=0.2, mcc=base[i])
    return table


def test_compare_models():
    rows = {r.model: r for r in compare_models(make_table(), "base")}
    assert rows["base"].p_raw["dice"] is None and not rows["base"].significant["dice"]
    # uniformly worse on 9 subjects: exact p = 2/512, times 3 comparisons
    assert rows["worse"].p_raw["dice"] == 2 / 512
    assert rows["worse"].significant["dice"]
    assert rows["twin_a"].p_adjusted == rows["twin_b"].p_adjusted


def test_baseline_against_itself():
    table = ScoreTable()
    for i in range(5):
        table.add(f"s{i}", "m", dice=0.5 + i / 10, avd=0.1, mcc=0.4)
        table.add(f"s{i}", "copy", dice=0.5 + i / 10, avd=0.1, mcc=0.4)
    rows = {r.model: r for r in compare_models(table, "m")}
    assert rows["copy"].p_raw["dice"] == 1.0 and not rows["copy"].significant["dice"]


def test_compare_models_missing_cells():
    table = make_table(4)
    del table.scores["worse"]["avd"]["s2"]
    with pytest.raises(ValueError, match="worse/avd/s2"):
        compare_models(table, "base")


def test_report_formats():
    rows = compare_models(make_table(), "base")
    text = format_table(rows)
    assert text.splitlines()[0].split()[0] == "Model"
    assert "N/A" in text.splitlines()[2]
    csv_text = rows_to_csv(rows)
    assert csv_text.splitlines()[0].startswith("model,dice_mean")
    assert len(csv_text.strip().splitlines()) == 5


def test_score_table_from_csv():
    text = "subject_id,model,dice,avd,mcc\ns1,a,0.5,0.1,0.4\ns1,b,0.6,0.2,0.5\n"
    table = ScoreTable.from_csv(text)
    assert table.models == ["a", "b"] and table.scores["b"]["dice"]["s1"] == 0.6
