import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cstn.metrics import (
    Metric, RegionSubset, day_split_report, evaluate, format_table, high_demand_subset, od_metrics,
    origin_metrics, report, reports_csv, subset_metrics, weekday_index, write_reports_csv,
)

MONDAY = np.datetime64("2014-01-06T00:00")


def test_hand_instance():
    m = od_metrics(np.array([6.0, 10.0]), np.array([5.0, 8.0]))
    assert abs(m.mape - 0.225) < 1e-9
    assert abs(m.rmse - np.sqrt(2.5)) < 1e-9 and abs(m.rmse - 1.5811) < 1e-4
    assert m.entries == 2


def test_perfect_prediction_and_full_filtering():
    g = np.array([5.0, 7.0, 9.0])
    assert tuple(od_metrics(g, g)) == (0.0, 0.0)
    empty = od_metrics(np.ones(3), np.array([1.0, 4.9, 0.0]))
    assert empty.empty and empty.mape is None and empty.rmse is None


def test_filter_applies_to_both_metrics():
    gts = np.array([2.0, 5.0, 10.0])
    preds = np.array([100.0, 6.0, 10.0])
    m = od_metrics(preds, gts)
    assert m.entries == 2
    assert m.mape == pytest.approx(0.1) and m.rmse == pytest.approx(np.sqrt(0.5))


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        od_metrics(np.ones(3), np.ones(4))


def test_origin_cancellation_instance():
    # 2 regions on a 2x1 grid; origin (0,0) sends 6 to each destination.
    gts = np.zeros((2, 2, 1))
    gts[0, 0, 0] = gts[1, 0, 0] = 6.0
    preds = gts.copy()
    preds[0, 0, 0], preds[1, 0, 0] = 8.0, 4.0
    assert od_metrics(preds, gts).mape > 0
    o = origin_metrics(preds, gts)
    assert o.mape == 0.0 and o.entries == 1


def test_uniform_overprediction():
    gts = np.random.default_rng(0).uniform(5, 20, (4, 6, 3, 2))
    assert origin_metrics(1.1 * gts, gts).mape == pytest.approx(0.10)
    assert od_metrics(1.1 * gts, gts).mape == pytest.approx(0.10)


@settings(max_examples=40)
@given(arrays(np.float64, (3, 4, 2, 2), elements=st.floats(0, 30)),
       arrays(np.float64, (3, 4, 2, 2), elements=st.floats(0, 30)),
       st.floats(0.1, 10))
def test_scaling_property(preds, gts, c):
    base, scaled = od_metrics(preds, gts, 5), od_metrics(c * preds, c * gts, 5 * c)
    assert base.entries == scaled.entries
    if not base.empty:
        assert scaled.mape == pytest.approx(base.mape, rel=1e-9, abs=1e-12)
        assert scaled.rmse == pytest.approx(c * base.rmse, rel=1e-9, abs=1e-12)


@settings(max_examples=30)
@given(arrays(np.float64, (5, 4, 2, 2), elements=st.floats(0, 30)), st.randoms())
def test_interval_order_invariance(gts, rnd):
    preds = gts * 1.3 + 1
    order = list(range(5))
    rnd.shuffle(order)
    a, b = od_metrics(preds, gts), od_metrics(preds[order], gts[order])
    assert a.entries == b.entries
    if not a.empty:
        assert a.mape == pytest.approx(b.mape) and a.rmse == pytest.approx(b.rmse)


def test_metric_entry_count_is_the_filtered_set():
    gts = np.array([1.0, 5.0, 6.0, 4.99, 100.0])
    m = od_metrics(gts * 2, gts)
    assert m.entries == int((gts >= 5).sum()) == 3


# ----------------------------------------------------------------- subsets


def test_high_demand_subset():
    counts = np.zeros((3, 4, 2, 2))
    counts[:, :, 1, 0] = 5  # origin 2 holds most demand
    counts[:, 0, 0, 1] = 1
    assert high_demand_subset(counts, 1).indices == (2,)
    assert set(high_demand_subset(counts, 4).indices) == {0, 1, 2, 3}
    assert high_demand_subset(counts, 3).indices == (2, 1, 0)  # tie 0/3 -> lower index
    with pytest.raises(ValueError):
        high_demand_subset(counts, 5)


def test_high_demand_matches_sort_oracle():
    r = np.random.default_rng(1)
    counts = r.poisson(r.lognormal(1, 1, (1, 12, 4, 3)), (50, 12, 4, 3))
    totals = {o: counts[:, :, o // 3, o % 3].sum() for o in range(12)}
    expect = sorted(totals, key=lambda o: (-totals[o], o))[:5]
    assert high_demand_subset(counts, 5).indices == tuple(expect)


def test_region_subset_validation():
    with pytest.raises(ValueError):
        RegionSubset((1, 1))
    with pytest.raises(ValueError):
        RegionSubset((0, 7)).validate(4)


def test_subset_all_equals_unrestricted():
    r = np.random.default_rng(2)
    gts = r.poisson(6, (5, 6, 3, 2)).astype(float)
    preds = gts + r.normal(0, 1, gts.shape)
    full = RegionSubset(tuple(range(6)))
    assert subset_metrics(preds, gts, full, "od") == od_metrics(preds, gts)
    assert subset_metrics(preds, gts, full, "origin") == origin_metrics(preds, gts)
    with pytest.raises(ValueError):
        subset_metrics(preds, gts, full, "both")


def test_subset_two_region_hand_case():
    # 3 regions on a 3x1 grid; subset {0, 2}
    gts = np.zeros((3, 3, 1))
    preds = np.zeros((3, 3, 1))
    gts[2, 0, 0], preds[2, 0, 0] = 10.0, 12.0  # 0 -> 2, inside
    gts[0, 2, 0], preds[0, 2, 0] = 5.0, 4.0  # 2 -> 0, inside
    gts[1, 0, 0], preds[1, 0, 0] = 8.0, 0.0  # 0 -> 1, outside
    sub = RegionSubset((0, 2))
    od = subset_metrics(preds, gts, sub, "od")
    assert od.entries == 2
    assert od.mape == pytest.approx((0.2 + 0.2) / 2)
    assert od.rmse == pytest.approx(np.sqrt((4 + 1) / 2))
    org = subset_metrics(preds, gts, sub, "origin")
    # origin 0: gt 18, pred 12; origin 2: gt 5, pred 4
    assert org.entries == 2 and org.mape == pytest.approx((6 / 18 + 1 / 5) / 2)
    none = subset_metrics(preds, gts, RegionSubset((1,)), "od")
    assert none.empty


# ---------------------------------------------------------------- calendar


def test_weekday_index():
    days = MONDAY + np.arange(7) * np.timedelta64(1, "D")
    np.testing.assert_array_equal(weekday_index(days), np.arange(7))


def test_single_monday_has_empty_weekend():
    ts = MONDAY + np.arange(48) * np.timedelta64(30, "m")
    g = np.full((48, 4, 2, 2), 6.0)
    rep = day_split_report(g * 1.2, g, ts)
    assert rep["weekday"].od.entries == 48 * 16 and rep["weekend"].od.empty
    assert rep["mon"].od_mape == pytest.approx(0.2)


def test_fourteen_day_partition_sizes():
    ts = MONDAY + np.arange(14 * 48) * np.timedelta64(30, "m")
    g = np.full((len(ts), 1, 1, 1), 6.0)
    rep = day_split_report(g * 0.9, g, ts)
    assert rep["weekday"].z == 10 * 48 and rep["weekend"].z == 4 * 48
    mapes = {rep[d].od_mape for d in ("mon", "tue", "wed", "thu", "fri", "sat", "sun")}
    assert len({round(v, 12) for v in mapes}) == 1


def test_evaluate_slices_and_csv(tmp_path):
    ts = MONDAY + np.arange(96) * np.timedelta64(30, "m")
    r = np.random.default_rng(3)
    gts = r.poisson(6, (96, 4, 2, 2)).astype(float)
    reps = evaluate(gts + 1, gts, ts, RegionSubset((0, 1)))
    names = [x.subset for x in reps]
    assert names[:4] == ["all", "high-demand", "weekday", "weekend"] and len(names) == 11
    text = reports_csv(reps)
    lines = text.splitlines()
    assert lines[0] == "subset,mode,mape,rmse,entries" and len(lines) == 1 + 2 * 11
    assert "weekend,od,,,0" in lines
    write_reports_csv(reps, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == text
    table = format_table(reps, "demo")
    assert table.startswith("demo") and "%" in table


def test_report_fields():
    g = np.full((2, 4, 2, 2), 5.0)
    rep = report("all", g, g)
    assert rep.z == 2 and rep.filtered_entry_count == 32 and rep.od_rmse == 0 and rep.o_mape == 0
    assert isinstance(rep.od, Metric)
