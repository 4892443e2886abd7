import datetime as dt
import math

import numpy as np
import pytest

from hetforest.data import CATEGORICAL, Covariate, CovariateSchema, DataError
from hetforest.features import (DAY, NIGHT, PEAK, TARIFFS, LoadPanel, TariffSchedule, assemble_dataset,
                                classify_halfhour, extract_features, feature_names, peak_outcome,
                                read_holidays, read_readings, read_survey)

from oracles import tabulate_features

MON = dt.date(2009, 7, 13)
WEEK = (MON, MON + dt.timedelta(days=6))
HOL = {MON + dt.timedelta(days=2)}


def halfhours(start, days):
    t0 = dt.datetime.combine(start, dt.time())
    return [t0 + dt.timedelta(minutes=30 * i) for i in range(48 * days)]


def panel_from(fn, start=MON, days=7, hid="h1"):
    return LoadPanel.from_records(hid, [(t, fn(t)) for t in halfhours(start, days)])


def expected_window(slot, weekday, holiday):
    hour = slot // 2
    if hour >= 23 or hour < 8:
        return NIGHT
    if weekday and not holiday and 17 <= hour < 19:
        return PEAK
    return DAY


@pytest.mark.parametrize("weekday", [True, False])
def test_all_96_window_classifications(weekday):
    sched = TARIFFS["C"]
    date = MON if weekday else MON + dt.timedelta(days=5)
    for slot in range(48):
        ts = dt.datetime.combine(date, dt.time(slot // 2, 30 * (slot % 2)))
        assert classify_halfhour(ts, (), sched) == expected_window(slot, weekday, False)
        assert sched.window(slot, weekday) == expected_window(slot, weekday, False)


def test_window_examples_and_errors():
    assert classify_halfhour(dt.datetime(2009, 7, 15, 17, 30)) == PEAK
    assert classify_halfhour(dt.datetime(2009, 7, 18, 17, 30)) == DAY
    assert classify_halfhour(dt.datetime(2009, 7, 15, 3, 0)) == NIGHT
    assert classify_halfhour(dt.datetime(2009, 7, 15, 17, 30), holidays={dt.date(2009, 7, 15)}) == DAY
    assert classify_halfhour(dt.datetime(2009, 7, 15, 22, 30)) == DAY
    assert classify_halfhour(dt.datetime(2009, 7, 15, 8, 0)) == DAY
    assert classify_halfhour(dt.datetime(2009, 7, 15, 19, 0)) == DAY
    with pytest.raises(ValueError):
        classify_halfhour(dt.datetime(2009, 7, 15, 17, 15))


def test_window_counts_partition_day():
    s = TARIFFS["C"]
    assert [s.slot_windows(True).count(w) for w in (NIGHT, DAY, PEAK)] == [18, 26, 4]
    assert [s.slot_windows(False).count(w) for w in (NIGHT, DAY, PEAK)] == [18, 30, 0]
    assert s.slot_windows(True, holiday=True) == s.slot_windows(False)


def test_tariff_prices_exact():
    c = TARIFFS["C"]
    assert (c.price(NIGHT), c.price(DAY), c.price(PEAK)) == (10.00, 13.00, 32.00)
    assert (TARIFFS["A"].peak, TARIFFS["B"].peak, TARIFFS["D"].peak) == (20.0, 26.0, 38.0)


def test_schedule_json_round_trip(tmp_path):
    path = tmp_path / "t.json"
    path.write_text('{"name": "C", "prices": {"Night": 10.0, "Day": 13.0, "Peak": 32.0}}')
    assert TariffSchedule.read(path) == TARIFFS["C"]
    custom = TariffSchedule.from_json('{"name": "x", "prices": {"Night": 1, "Day": 2, "Peak": 3},'
                                      ' "night": ["22:00", "07:00"], "peak": ["16:00", "18:30"]}')
    assert custom.window(44, True) == NIGHT and custom.window(36, True) == PEAK
    with pytest.raises(ValueError):
        TariffSchedule.from_json('{"name": "x", "prices": {"Night": 1, "Day": 2, "Peak": 3},'
                                 ' "peak": ["16:15", "18:00"]}')


def test_peak_outcome_constant():
    assert peak_outcome(panel_from(lambda t: 0.8), *WEEK) == pytest.approx(0.8, abs=1e-15)


def test_peak_outcome_weekend_only_raises():
    with pytest.raises(DataError, match="no peak"):
        peak_outcome(panel_from(lambda t: 1.0, start=MON + dt.timedelta(days=5), days=2), *WEEK)


def test_peak_outcome_two_weekdays_by_hand():
    values = {(0, 34): 1.0, (0, 35): 2.0, (0, 36): 3.0, (0, 37): 4.0,
              (1, 34): 0.5, (1, 35): 0.5, (1, 36): 1.5, (1, 37): 2.5}

    def fn(t):
        return values.get(((t.date() - MON).days, t.hour * 2 + t.minute // 30), 9.0)

    assert peak_outcome(panel_from(fn, days=2), *WEEK) == pytest.approx(15.0 / 8, abs=1e-15)


def random_panel(seed=0, start=MON, days=7, hid="h1"):
    rng = np.random.default_rng(seed)
    ts = halfhours(start, days)
    kwh = np.round(rng.gamma(2.0, 0.3, len(ts)), 3)
    return LoadPanel.from_records(hid, list(zip(ts, kwh))), list(zip(ts, kwh.tolist()))


def test_features_match_tabulation():
    panel, records = random_panel(1)
    got = extract_features(panel, *WEEK, holidays=HOL)
    want = tabulate_features(records, HOL)
    assert list(got) == feature_names() and len(got) == 97
    for name in feature_names():
        if math.isnan(want[name]):
            assert math.isnan(got[name]), name
        else:
            assert got[name] == pytest.approx(want[name], abs=1e-9), name
    assert peak_outcome(panel, *WEEK, holidays=HOL) == pytest.approx(want["mean_peak"], abs=1e-9)


def test_features_span_months():
    start = dt.date(2009, 8, 28)
    panel, records = random_panel(2, start=start, days=9)
    got = extract_features(panel, start, start + dt.timedelta(days=8))
    want = tabulate_features(records)
    for name in ("mean_usage_aug", "var_usage_sep", "var_peak_aug", "var_peak_sep"):
        assert got[name] == pytest.approx(want[name], abs=1e-9)
    assert math.isnan(got["mean_usage_dec"])


def test_constant_profile():
    f = extract_features(panel_from(lambda t: 0.7), *WEEK)
    for name, v in f.items():
        if name.startswith("mean_") and not math.isnan(v) and name != "mean_halfhour_cv":
            assert v == pytest.approx(0.7, abs=1e-12), name
        if name.startswith("var_") and not math.isnan(v):
            assert v == pytest.approx(0.0, abs=1e-12), name
    assert f["mean_halfhour_cv"] == pytest.approx(0.0, abs=1e-12)
    assert f["ratio_night_daily"] == pytest.approx(1.0, abs=1e-12)
    assert f["ratio_lunch_daily"] == pytest.approx(1.0, abs=1e-12)


def test_lunchtime_only_profile():
    f = extract_features(panel_from(lambda t: 1.0 if 12 <= t.hour < 14 else 0.0), *WEEK)
    assert f["ratio_lunch_daily"] == pytest.approx(12.0)
    assert f["mean_night"] == 0.0 and f["ratio_night_daily"] == 0.0
    assert f["mean_slot_0000"] == 0.0 and f["mean_slot_1230"] == 1.0
    assert f["mean_halfhour_cv"] == 0.0


def test_invariants_on_random_panel():
    f = extract_features(random_panel(3)[0], *WEEK)
    assert f["min_usage"] <= f["mean_usage"] <= f["max_usage"]
    assert all(v >= 0 for k, v in f.items() if k.startswith(("var_", "ratio_")) and not math.isnan(v))


def test_energy_accounting():
    panel = random_panel(4)[0]
    f = extract_features(panel, *WEEK, holidays=HOL)
    counts = panel.frame(*WEEK, holidays=HOL)["window"].value_counts()
    total = sum(counts[w] * f[f"mean_{w.lower()}"] for w in (NIGHT, DAY, PEAK))
    assert f["mean_usage"] == pytest.approx(total / counts.sum(), abs=1e-12)


def test_order_independence_and_duplicates():
    _, records = random_panel(5)
    shuffled = [records[i] for i in np.random.default_rng(0).permutation(len(records))]
    a = extract_features(LoadPanel.from_records("h", records), *WEEK)
    b = extract_features(LoadPanel.from_records("h", shuffled), *WEEK)
    assert a == pytest.approx(b, nan_ok=True)
    assert extract_features(LoadPanel.from_records("h", records), *WEEK) == pytest.approx(a, nan_ok=True)
    with pytest.raises(DataError, match="duplicate"):
        LoadPanel.from_records("h", records + records[:1])


def test_panel_validation_and_gaps():
    ts = np.array(["2009-07-13T00:00", "2009-07-13T00:30", "2009-07-13T02:00"], dtype="datetime64[m]")
    p = LoadPanel("h", ts, [1.0, 1.0, 1.0])
    assert p.gaps() == [(ts[1], ts[2])]
    with pytest.raises(DataError):
        LoadPanel("h", ts[::-1], [1.0, 1.0, 1.0])
    with pytest.raises(DataError):
        LoadPanel("h", ts, [1.0, -1.0, 1.0])
    with pytest.raises(DataError):
        LoadPanel("h", np.array(["2009-07-13T00:10"], dtype="datetime64[m]"), [1.0])


def test_insufficient_coverage():
    with pytest.raises(DataError, match="7 days"):
        extract_features(panel_from(lambda t: 1.0, days=6), *WEEK)


def test_readers(tmp_path):
    (tmp_path / "r.csv").write_text("household_id,timestamp,kwh\nb,2009-07-13T00:30,1.5\n"
                                    "a,2009-07-13T00:00,2\nb,2009-07-13T00:00,0.5\n")
    panels = read_readings(tmp_path / "r.csv")
    assert list(panels) == ["a", "b"]
    np.testing.assert_array_equal(panels["b"].kwh, [0.5, 1.5])
    (tmp_path / "bad.csv").write_text("household_id,timestamp,kwh\na,yesterday,1\n")
    with pytest.raises(DataError, match="line 2"):
        read_readings(tmp_path / "bad.csv")
    (tmp_path / "h.txt").write_text("# holidays\n2009-12-25\n\n2009-12-26\n")
    assert read_holidays(tmp_path / "h.txt") == {dt.date(2009, 12, 25), dt.date(2009, 12, 26)}
    schema = CovariateSchema((Covariate("tenure", CATEGORICAL, ("own", "rent")),))
    (tmp_path / "s.csv").write_text("household_id,tenure\na,own\nb,rent\n")
    assert read_survey(tmp_path / "s.csv", schema) == {"a": {"tenure": "own"}, "b": {"tenure": "rent"}}
    (tmp_path / "s2.csv").write_text("household_id,tenure\na,own\na,rent\n")
    with pytest.raises(DataError, match="duplicate"):
        read_survey(tmp_path / "s2.csv", schema)


SURVEY_SCHEMA = CovariateSchema((Covariate("tenure", CATEGORICAL, ("own", "rent")),))


def sources(ids):
    feats = {h: {"f1": float(i), "f2": 2.0 * i} for i, h in enumerate(ids)}
    return (feats, {h: 10.0 + i for i, h in enumerate(ids)}, {h: i % 2 for i, h in enumerate(ids)},
            {h: {"tenure": ("own", "rent")[i % 2]} for i, h in enumerate(ids)})


def test_assemble_shuffled_inputs():
    f, y, d, s = sources(["c", "a", "b"])
    ref = assemble_dataset(f, y, d, s, SURVEY_SCHEMA)
    rev = {k: dict(reversed(list(v.items()))) for k, v in {"f": f, "y": y, "d": d, "s": s}.items()}
    other = assemble_dataset(rev["f"], rev["y"], rev["d"], rev["s"], SURVEY_SCHEMA)
    assert list(ref.ids) == ["a", "b", "c"]
    np.testing.assert_array_equal(ref.x, other.x)
    np.testing.assert_array_equal(ref.y, [11.0, 12.0, 10.0])
    assert tuple(ref.schema.names) == ("tenure", "f1", "f2")


def test_assemble_single_and_mismatch():
    f, y, d, s = sources(["only"])
    assert assemble_dataset(f, y, d, s, SURVEY_SCHEMA).n == 1
    f, y, d, _ = sources(["a", "b"])
    with pytest.raises(DataError, match="'z'"):
        assemble_dataset(f, {"a": 1.0, "z": 2.0}, d)
    f["a"]["f1"] = float("nan")
    with pytest.raises(DataError, match="without a value"):
        assemble_dataset(f, y, d)
