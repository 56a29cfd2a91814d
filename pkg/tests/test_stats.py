"""Agreement statistics vs naive reference implementations and hand values."""

import math
import os

import numpy as np
import pytest

from tcscorer import stats
from tcscorer.errors import UndefinedStatisticError


# ---------------------------------------------------------------------------
# naive reference implementations (pure-python loops, no shared code)


def naive_pearson(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def naive_lin_ccc(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    sxx = sum((a - mx) ** 2 for a in x) / n
    syy = sum((b - my) ** 2 for b in y) / n
    return 2.0 * sxy / (sxx + syy + (mx - my) ** 2)


def naive_mae(x, y):
    return sum(abs(a - b) for a, b in zip(x, y)) / len(x)


def naive_agreement(x, y, cutoff):
    cand = [a >= cutoff for a in x]
    ref = [b >= cutoff for b in y]
    opa = sum(c == r for c, r in zip(cand, ref)) / len(x)
    pos = [c for c, r in zip(cand, ref) if r]
    neg = [c for c, r in zip(cand, ref) if not r]
    ppa = sum(pos) / len(pos)
    npa = sum(not c for c in neg) / len(neg)
    return opa, npa, ppa


def naive_median(values):
    s = sorted(values)
    return s[(len(s) - 1) // 2]


def naive_delta(rows):
    # unordered pairwise sum over k(k-1): half the mean pair difference
    k = len(rows[0])
    out = []
    for row in rows:
        total = 0.0
        for i in range(k):
            for j in range(i + 1, k):
                total += abs(row[i] - row[j])
        out.append(total / (k * (k - 1)))
    return out


def random_table(rng, n=None, k=3):
    n = n if n is not None else int(rng.integers(4, 40))
    cols = [list(rng.uniform(0.0, 100.0, n)) for _ in range(k)]
    return cols


# ---------------------------------------------------------------------------
# hand values


def test_lin_ccc_hand_value_four_sevenths():
    assert stats.lin_ccc([1.0, 2.0, 3.0], [2.0, 3.0, 4.0]) == \
        pytest.approx(4.0 / 7.0, abs=1e-15)


def test_agreement_hand_enumeration_all_half():
    rep = stats.status_agreement([10.0, 30.0, 50.0, 20.0],
                                 [30.0, 20.0, 40.0, 10.0], cutoff=25.0)
    assert rep.opa == 0.5
    assert rep.ppa == 0.5
    assert rep.npa == 0.5


def test_cutoff_boundary_is_inclusive_unless_strict():
    rep = stats.status_agreement([25.0, 25.0], [25.0, 0.0], cutoff=25.0)
    assert rep.opa == 0.5 and rep.ppa == 1.0 and rep.npa == 0.0
    strict = stats.status_agreement([25.0, 26.0], [26.0, 25.0], cutoff=25.0,
                                    strict=True)
    assert strict.ppa == 0.0 and strict.npa == 0.0


def test_median_consolidate_uses_lower_median():
    cols = [[1.0], [2.0], [3.0], [4.0]]
    assert stats.median_consolidate(cols)[0] == 2.0
    assert stats.median_consolidate(cols[:3])[0] == 2.0


def test_identity_pair_scores_perfectly():
    x = [3.0, 28.0, 55.0, 90.0]
    rep = stats.concordance(x, list(x))
    assert rep.lcc == 1.0 and rep.pcc == 1.0 and rep.mae == 0.0


def test_constant_vectors():
    assert stats.lin_ccc([5.0, 5.0, 5.0], [5.0, 5.0, 5.0]) == 1.0
    assert stats.lin_ccc([5.0, 5.0], [7.0, 7.0]) == 0.0
    with pytest.raises(UndefinedStatisticError):
        stats.pearson([5.0, 5.0, 5.0], [1.0, 2.0, 3.0])


# ---------------------------------------------------------------------------
# oracle equivalence on random tables


def test_metrics_match_naive_oracles():
    rng = np.random.default_rng(20)
    for _ in range(100):
        x, y, _ = random_table(rng)
        assert stats.pearson(x, y) == pytest.approx(naive_pearson(x, y),
                                                    abs=1e-12)
        assert stats.lin_ccc(x, y) == pytest.approx(naive_lin_ccc(x, y),
                                                    abs=1e-12)
        assert stats.mae(x, y) == pytest.approx(naive_mae(x, y), abs=1e-12)
        cutoff = float(rng.uniform(10.0, 90.0))
        try:
            rep = stats.status_agreement(x, y, cutoff=cutoff)
        except UndefinedStatisticError:
            ref_status = [b >= cutoff for b in y]
            assert all(ref_status) or not any(ref_status)
            continue
        opa, npa, ppa = naive_agreement(x, y, cutoff)
        assert rep.opa == pytest.approx(opa, abs=1e-12)
        assert rep.npa == pytest.approx(npa, abs=1e-12)
        assert rep.ppa == pytest.approx(ppa, abs=1e-12)


def test_median_and_delta_match_naive_oracles():
    rng = np.random.default_rng(21)
    for _ in range(50):
        cols = random_table(rng, k=int(rng.integers(2, 5)))
        rows = list(zip(*cols))
        med = stats.median_consolidate(cols)
        assert np.abs(med - np.array([naive_median(r) for r in rows])) \
            .max() < 1e-12
        delta = stats.rater_variability(cols)
        assert delta.rater_count == len(cols)
        assert np.abs(delta.values - np.array(naive_delta(rows))) \
            .max() < 1e-12


def test_curve_matches_naive_refiltering():
    rng = np.random.default_rng(22)
    for _ in range(20):
        cols = random_table(rng, n=25)
        cand = list(rng.uniform(0.0, 100.0, 25))
        delta = stats.rater_variability(cols)
        reference = stats.median_consolidate(cols)
        thresholds = sorted(rng.uniform(0.0, 30.0, 4)) + [1000.0]
        points = stats.filtered_concordance_curve(cand, reference, delta,
                                                  thresholds)
        for pt in points:
            keep = [i for i in range(25)
                    if delta.values[i] <= pt.threshold]
            assert pt.included_n == len(keep)
            assert pt.included_fraction == pytest.approx(len(keep) / 25.0,
                                                         abs=1e-15)
            if pt.concordance is not None:
                xs = [cand[i] for i in keep]
                ys = [reference[i] for i in keep]
                assert pt.concordance.lcc == pytest.approx(
                    naive_lin_ccc(xs, ys), abs=1e-12)
                assert pt.concordance.mae == pytest.approx(
                    naive_mae(xs, ys), abs=1e-12)


def test_curve_at_max_threshold_equals_unfiltered():
    rng = np.random.default_rng(23)
    cols = random_table(rng, n=30)
    cand = list(rng.uniform(0.0, 100.0, 30))
    delta = stats.rater_variability(cols)
    reference = stats.median_consolidate(cols)
    top = float(delta.values.max())
    points = stats.filtered_concordance_curve(cand, reference, delta, [top])
    plain = stats.concordance(cand, reference)
    assert points[0].included_n == 30
    assert points[0].concordance.lcc == plain.lcc
    assert points[0].concordance.mae == plain.mae


# ---------------------------------------------------------------------------
# structural properties


def test_lin_ccc_is_attenuated_pearson():
    rng = np.random.default_rng(24)
    for _ in range(1000):
        n = int(rng.integers(3, 20))
        x = rng.uniform(0.0, 100.0, n)
        y = rng.uniform(0.0, 100.0, n)
        try:
            p = stats.pearson(x, y)
        except UndefinedStatisticError:
            continue
        assert abs(stats.lin_ccc(x, y)) <= abs(p) + 1e-12


def test_opa_decomposes_over_strata():
    rng = np.random.default_rng(25)
    for _ in range(200):
        n = int(rng.integers(4, 30))
        x = rng.uniform(0.0, 100.0, n)
        y = rng.uniform(0.0, 100.0, n)
        try:
            rep = stats.status_agreement(x, y, cutoff=40.0)
        except UndefinedStatisticError:
            continue
        pos = int((y >= 40.0).sum())
        neg = n - pos
        assert rep.opa * n == pytest.approx(
            rep.ppa * pos + rep.npa * neg, abs=1e-9)


def test_metrics_are_permutation_invariant():
    rng = np.random.default_rng(26)
    x = rng.uniform(0.0, 100.0, 20)
    y = rng.uniform(0.0, 100.0, 20)
    perm = rng.permutation(20)
    a = stats.concordance(x, y)
    b = stats.concordance(x[perm], y[perm])
    assert a.lcc == pytest.approx(b.lcc, abs=1e-12)
    assert a.pcc == pytest.approx(b.pcc, abs=1e-12)
    assert a.mae == pytest.approx(b.mae, abs=1e-12)


def test_npa_ppa_are_reference_relative():
    x = [30.0, 30.0, 10.0]
    y = [30.0, 10.0, 10.0]
    fwd = stats.status_agreement(x, y)
    rev = stats.status_agreement(y, x)
    assert fwd.opa == rev.opa
    assert fwd.ppa == 1.0 and fwd.npa == 0.5
    assert rev.ppa == 0.5 and rev.npa == 1.0


def test_leave_one_out_matches_direct_recomputation():
    rng = np.random.default_rng(27)
    cols = {f"TC_{i}": rng.uniform(0.0, 100.0, 12) for i in range(1, 6)}
    entries = stats.leave_one_out_analysis(cols)
    assert [e.column for e in entries] == list(cols)
    for entry in entries:
        rest = [v for k, v in cols.items() if k != entry.column]
        ref = stats.median_consolidate(rest)
        direct = stats.concordance(cols[entry.column], ref)
        assert entry.concordance.lcc == direct.lcc
        assert entry.concordance.mae == direct.mae
    with pytest.raises(UndefinedStatisticError):
        stats.leave_one_out_analysis({k: cols[k] for k in list(cols)[:3]})


# ---------------------------------------------------------------------------
# degenerate inputs


def test_undefined_statistics_raise():
    with pytest.raises(UndefinedStatisticError):
        stats.pearson([1.0], [2.0])
    with pytest.raises(UndefinedStatisticError):
        stats.concordance([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(UndefinedStatisticError):
        stats.status_agreement([50.0, 60.0], [70.0, 80.0])  # no negatives
    with pytest.raises(UndefinedStatisticError):
        stats.status_agreement([50.0, 60.0], [1.0, 2.0])  # no positives
    with pytest.raises(UndefinedStatisticError):
        stats.rater_variability([[1.0, 2.0]])
    with pytest.raises(UndefinedStatisticError):
        stats.median_consolidate([[1.0, 2.0], [1.0]])


# ---------------------------------------------------------------------------
# score table and CSV plumbing


def test_score_table_roundtrip_preserves_doubles(tmp_path):
    rng = np.random.default_rng(28)
    table = stats.ScoreTable(
        slide_ids=[f"s{i}" for i in range(7)],
        columns={"TC_1": rng.uniform(0, 100, 7),
                 "TC_cnn": rng.uniform(0, 100, 7)})
    path = os.path.join(tmp_path, "scores.csv")
    table.save_csv(path)
    loaded = stats.ScoreTable.load_csv(path)
    assert loaded.slide_ids == table.slide_ids
    for name in table.columns:
        assert np.array_equal(loaded.column(name), table.column(name))


def test_score_table_subset_and_validation():
    table = stats.ScoreTable(slide_ids=["a", "b", "c"],
                             columns={"TC_1": [1.0, 2.0, 3.0]})
    sub = table.subset([2, 0])
    assert sub.slide_ids == ["c", "a"]
    assert list(sub.column("TC_1")) == [3.0, 1.0]
    with pytest.raises(UndefinedStatisticError):
        table.add_column("bad", [1.0])
    with pytest.raises(KeyError):
        table.column("missing")


def test_curve_rows_csv_layout(tmp_path):
    rng = np.random.default_rng(29)
    cols = random_table(rng, n=10)
    delta = stats.rater_variability(cols)
    ref = stats.median_consolidate(cols)
    cand = list(rng.uniform(0, 100, 10))
    points = stats.filtered_concordance_curve(cand, ref, delta,
                                              [0.0, 5.0, 100.0])
    path = os.path.join(tmp_path, "curves.csv")
    stats.curve_rows_to_csv(points, path)
    with open(path) as fh:
        lines = fh.read().strip().splitlines()
    assert lines[0] == ("threshold,lcc,pcc,mae,opa,npa,ppa,"
                        "included_fraction")
    assert len(lines) == 4
