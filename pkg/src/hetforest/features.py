"""Smart-meter load panels, time-of-use windows and household usage features.

A reading's timestamp marks the start of its half-hour.  Windows:

* Night: 23:00 to 08:00 every day;
* Peak: 17:00 to 19:00 on non-holiday weekdays;
* Day: every other half-hour (08:00 to 23:00 outside the peak).
"""
from __future__ import annotations

import csv
import datetime as dt
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

from .data import CONTINUOUS, Covariate, CovariateSchema, DataError, Dataset

NIGHT, DAY, PEAK = "Night", "Day", "Peak"
WINDOWS = (NIGHT, DAY, PEAK)
SLOTS_PER_DAY = 48
LUNCH_SLOTS = range(24, 28)  # 12:00 to 14:00
MONTHS = {7: "jul", 8: "aug", 9: "sep", 10: "oct", 11: "nov", 12: "dec"}

BENCHMARK_PERIOD = (dt.date(2009, 7, 14), dt.date(2009, 12, 31))
TRIAL_PERIOD = (dt.date(2010, 1, 1), dt.date(2010, 12, 31))


def _slot(hhmm: str) -> int:
    h, m = (int(v) for v in hhmm.split(":"))
    if m not in (0, 30) or not 0 <= h <= 24 or (h == 24 and m):
        raise ValueError(f"{hhmm!r} is not on the half-hour grid")
    return (2 * h + m // 30) % SLOTS_PER_DAY


@dataclass(frozen=True)
class TariffSchedule:
    """Prices in cents per kWh and the window boundaries (half-hour slots)."""

    name: str
    night: float
    day: float
    peak: float
    night_start: int = 46
    night_end: int = 16
    peak_start: int = 34
    peak_end: int = 38

    def price(self, window: str) -> float:
        return {NIGHT: self.night, DAY: self.day, PEAK: self.peak}[window]

    def window(self, slot: int, weekday: bool, holiday: bool = False) -> str:
        """Window of half-hour ``slot`` (0 = 00:00) on a day of the given type."""
        if not 0 <= slot < SLOTS_PER_DAY:
            raise ValueError(f"slot {slot} out of range")
        s, e = self.night_start, self.night_end
        if (s <= slot or slot < e) if s > e else (s <= slot < e):
            return NIGHT
        if weekday and not holiday and self.peak_start <= slot < self.peak_end:
            return PEAK
        return DAY

    def slot_windows(self, weekday: bool, holiday: bool = False) -> list[str]:
        return [self.window(k, weekday, holiday) for k in range(SLOTS_PER_DAY)]

    @classmethod
    def from_json(cls, text: str) -> "TariffSchedule":
        """Parse ``{"name", "prices": {Night, Day, Peak}, "night": [from, to], "peak": [from, to]}``."""
        doc = json.loads(text)
        prices = doc["prices"]
        night = doc.get("night", ["23:00", "08:00"])
        peak = doc.get("peak", ["17:00", "19:00"])
        return cls(str(doc["name"]), float(prices[NIGHT]), float(prices[DAY]), float(prices[PEAK]),
                   _slot(night[0]), _slot(night[1]), _slot(peak[0]), _slot(peak[1]))

    @classmethod
    def read(cls, path: str | Path) -> "TariffSchedule":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


TARIFFS = {
    "A": TariffSchedule("A", 12.00, 14.00, 20.00),
    "B": TariffSchedule("B", 11.00, 13.50, 26.00),
    "C": TariffSchedule("C", 10.00, 13.00, 32.00),
    "D": TariffSchedule("D", 9.00, 12.50, 38.00),
}
DEFAULT_SCHEDULE = TARIFFS["C"]


def _on_grid(ts: dt.datetime) -> bool:
    return ts.minute in (0, 30) and ts.second == 0 and ts.microsecond == 0


def classify_halfhour(timestamp: dt.datetime, holidays: Iterable[dt.date] = (),
                      schedule: TariffSchedule = DEFAULT_SCHEDULE) -> str:
    """Tariff window of the half-hour starting at ``timestamp``."""
    if not _on_grid(timestamp):
        raise ValueError(f"{timestamp.isoformat()} is not on the half-hour grid")
    slot = 2 * timestamp.hour + timestamp.minute // 30
    return schedule.window(slot, timestamp.weekday() < 5, timestamp.date() in set(holidays))


@dataclass(frozen=True)
class LoadPanel:
    """Half-hourly readings of one household, strictly increasing in time."""

    household_id: str
    timestamps: np.ndarray  # datetime64[m]
    kwh: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[m]")
        kwh = np.asarray(self.kwh, dtype=float)
        if ts.shape != kwh.shape or ts.ndim != 1:
            raise DataError(f"household {self.household_id}: timestamps and readings differ in length")
        minutes = ts.astype(np.int64)
        if (minutes % 30 != 0).any():
            bad = ts[minutes % 30 != 0][0]
            raise DataError(f"household {self.household_id}: {bad} is not on the half-hour grid")
        if (np.diff(minutes) <= 0).any():
            k = int(np.flatnonzero(np.diff(minutes) <= 0)[0])
            raise DataError(f"household {self.household_id}: timestamps not strictly increasing at {ts[k + 1]}")
        if not (np.isfinite(kwh).all() and (kwh >= 0).all()):
            raise DataError(f"household {self.household_id}: readings must be finite and >= 0")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "kwh", kwh)

    @classmethod
    def from_records(cls, household_id: str, records: Iterable[tuple[dt.datetime, float]]) -> "LoadPanel":
        """Build from unordered (timestamp, kWh) pairs; duplicate timestamps are rejected."""
        recs = sorted(records, key=lambda r: r[0])
        for a, b in zip(recs, recs[1:]):
            if a[0] == b[0]:
                raise DataError(f"household {household_id}: duplicate reading at {a[0].isoformat()}")
        ts = np.array([np.datetime64(r[0], "m") for r in recs], dtype="datetime64[m]")
        return cls(household_id, ts, np.array([r[1] for r in recs], dtype=float))

    @property
    def date_range(self) -> tuple[np.datetime64, np.datetime64] | None:
        if self.timestamps.size == 0:
            return None
        return self.timestamps[0], self.timestamps[-1]

    def gaps(self) -> list[tuple[np.datetime64, np.datetime64]]:
        """(last reading before, first reading after) for every hole in the grid."""
        step = np.diff(self.timestamps.astype(np.int64))
        k = np.flatnonzero(step > 30)
        return [(self.timestamps[i], self.timestamps[i + 1]) for i in k]

    def frame(self, start: dt.date, end: dt.date, holidays: Iterable[dt.date] = (),
              schedule: TariffSchedule = DEFAULT_SCHEDULE) -> pd.DataFrame:
        """Readings dated ``start..end`` inclusive, annotated with calendar fields and window."""
        ts = pd.DatetimeIndex(self.timestamps)
        df = pd.DataFrame({"ts": ts, "kwh": self.kwh})
        df["date"] = ts.date
        df = df[(df["date"] >= start) & (df["date"] <= end)].reset_index(drop=True)
        t = pd.DatetimeIndex(df["ts"])
        df["slot"] = t.hour * 2 + t.minute // 30
        df["weekday"] = t.weekday < 5
        df["month"] = t.month
        hol = set(holidays)
        df["holiday"] = [d in hol for d in df["date"]]
        table = {(w, h): schedule.slot_windows(w, h) for w in (True, False) for h in (True, False)}
        df["window"] = [table[(w, h)][s] for w, h, s in zip(df["weekday"], df["holiday"], df["slot"])]
        return df


def peak_outcome(panel: LoadPanel, start: dt.date = TRIAL_PERIOD[0], end: dt.date = TRIAL_PERIOD[1],
                 holidays: Iterable[dt.date] = (), schedule: TariffSchedule = DEFAULT_SCHEDULE) -> float:
    """Mean kWh over Peak half-hours dated ``start..end``."""
    df = panel.frame(start, end, holidays, schedule)
    peak = df.loc[df["window"] == PEAK, "kwh"]
    if peak.empty:
        raise DataError(f"household {panel.household_id}: no peak half-hours between {start} and {end}")
    return float(peak.mean())


def _mean(v: pd.Series) -> float:
    return float(v.mean()) if len(v) else float("nan")


def _var(v: pd.Series) -> float:
    # sample variance; a single reading has variance 0
    if len(v) == 0:
        return float("nan")
    return float(v.var(ddof=1)) if len(v) > 1 else 0.0


def _ratio(a: float, b: float) -> float:
    return a / b if b > 0 else 0.0


def feature_names() -> list[str]:
    """Column order of :func:`extract_features` output."""
    names = ["mean_usage", "min_usage", "max_usage", "var_usage"]
    for w in ("peak", "nonpeak", "night", "day"):
        names += [f"mean_{w}", f"var_{w}"]
    for part in ("weekday", "weekend"):
        names += [f"mean_usage_{part}", f"var_usage_{part}"]
        ws = ("peak", "night", "day") if part == "weekday" else ("night", "day")
        for w in ws:
            names += [f"mean_{w}_{part}", f"var_{w}_{part}"]
    names += ["mean_daily_max", "mean_daily_min", "mean_halfhour_cv",
              "ratio_night_daily", "ratio_lunch_daily"]
    for m in MONTHS.values():
        names += [f"mean_usage_{m}", f"var_usage_{m}", f"var_peak_{m}"]
    names += [f"mean_slot_{k // 2:02d}{30 * (k % 2):02d}" for k in range(SLOTS_PER_DAY)]
    return names


def extract_features(panel: LoadPanel, start: dt.date = BENCHMARK_PERIOD[0],
                     end: dt.date = BENCHMARK_PERIOD[1], holidays: Iterable[dt.date] = (),
                     schedule: TariffSchedule = DEFAULT_SCHEDULE) -> dict[str, float]:
    """Usage covariates over readings dated ``start..end``.

    Variances are sample variances (``ddof=1``).  "Day" is the Day tariff
    window, "nonpeak" everything outside the Peak window and "weekday"
    Monday to Friday.  The half-hour coefficient of variation is the
    across-day standard deviation over the mean per slot, 0 for slots with
    zero mean, averaged over slots.  Monthly features are NaN for months
    without readings.

    Raises
    ------
    DataError
        If fewer than 7 distinct days have readings in range.
    """
    df = panel.frame(start, end, holidays, schedule)
    if df["date"].nunique() < 7:
        raise DataError(f"household {panel.household_id}: fewer than 7 days of readings in range")
    k = df["kwh"]
    win = df["window"]
    wd = df["weekday"]
    sel = {"peak": win == PEAK, "nonpeak": win != PEAK, "night": win == NIGHT, "day": win == DAY}
    out = {"mean_usage": _mean(k), "min_usage": float(k.min()), "max_usage": float(k.max()),
           "var_usage": _var(k)}
    for w, m in sel.items():
        out[f"mean_{w}"] = _mean(k[m])
        out[f"var_{w}"] = _var(k[m])
    for part, pm in (("weekday", wd), ("weekend", ~wd)):
        out[f"mean_usage_{part}"] = _mean(k[pm])
        out[f"var_usage_{part}"] = _var(k[pm])
        ws = ("peak", "night", "day") if part == "weekday" else ("night", "day")
        for w in ws:
            out[f"mean_{w}_{part}"] = _mean(k[pm & sel[w]])
            out[f"var_{w}_{part}"] = _var(k[pm & sel[w]])
    daily = k.groupby(df["date"])
    out["mean_daily_max"] = float(daily.max().mean())
    out["mean_daily_min"] = float(daily.min().mean())
    by_slot = k.groupby(df["slot"])
    slot_mean = by_slot.mean()
    slot_sd = by_slot.apply(lambda v: v.std(ddof=1) if len(v) > 1 else 0.0)
    cv = np.where(slot_mean > 0, slot_sd / slot_mean.where(slot_mean > 0, 1.0), 0.0)
    out["mean_halfhour_cv"] = float(np.mean(cv))
    out["ratio_night_daily"] = _ratio(out["mean_night"], out["mean_usage"])
    out["ratio_lunch_daily"] = _ratio(_mean(k[df["slot"].isin(LUNCH_SLOTS)]), out["mean_usage"])
    for num, m in MONTHS.items():
        mm = df["month"] == num
        out[f"mean_usage_{m}"] = _mean(k[mm])
        out[f"var_usage_{m}"] = _var(k[mm])
        out[f"var_peak_{m}"] = _var(k[mm & sel["peak"]])
    for s in range(SLOTS_PER_DAY):
        out[f"mean_slot_{s // 2:02d}{30 * (s % 2):02d}"] = float(slot_mean.get(s, np.nan))
    return {name: out[name] for name in feature_names()}


# ---------------------------------------------------------------- readers --

def _parse_ts(text: str, where: str) -> dt.datetime:
    try:
        return dt.datetime.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"{where}: bad timestamp {text!r}") from None


def read_readings(path: str | Path) -> dict[str, LoadPanel]:
    """Readings CSV with columns ``household_id, timestamp, kwh``."""
    per: dict[str, list[tuple[dt.datetime, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"household_id", "timestamp", "kwh"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        for i, row in enumerate(reader, start=2):
            where = f"{path}, line {i}"
            ts = _parse_ts(row["timestamp"], where)
            try:
                kwh = float(row["kwh"])
            except ValueError:
                raise DataError(f"{where}: bad kwh {row['kwh']!r}") from None
            per.setdefault(row["household_id"].strip(), []).append((ts, kwh))
    return {hid: LoadPanel.from_records(hid, recs) for hid, recs in sorted(per.items())}


def read_holidays(path: str | Path) -> set[dt.date]:
    """One ISO date per line; blank lines and ``#`` comments ignored."""
    out = set()
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            out.add(dt.date.fromisoformat(line))
        except ValueError:
            raise DataError(f"{path}, line {i}: bad date {line!r}") from None
    return out


def read_survey(path: str | Path, schema: CovariateSchema) -> dict[str, dict[str, str]]:
    """Survey CSV keyed by ``household_id`` holding the schema's columns."""
    out: dict[str, dict[str, str]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = ({"household_id"} | set(schema.names)) - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        for i, row in enumerate(reader, start=2):
            hid = row["household_id"].strip()
            if hid in out:
                raise DataError(f"{path}, line {i}: duplicate household_id {hid!r}")
            out[hid] = {name: row[name].strip() for name in schema.names}
    return out


# --------------------------------------------------------------- assembly --

def assemble_dataset(features: Mapping[str, Mapping[str, float]],
                     outcome: Mapping[str, float], treatment: Mapping[str, int],
                     survey: Mapping[str, Mapping[str, str]] | None = None,
                     survey_schema: CovariateSchema | None = None) -> Dataset:
    """Join per-household sources into a :class:`Dataset` ordered by id.

    Covariates are the survey columns (per ``survey_schema``) followed by
    the usage features in the order of the first feature row.
    """
    sources = {"features": features, "outcome": outcome, "treatment": treatment}
    if survey is not None:
        if survey_schema is None:
            raise ValueError("a survey needs its schema")
        sources["survey"] = survey
    ids = set(features)
    for name, src in sources.items():
        if set(src) != ids:
            bad = sorted(set(src) ^ ids)
            raise DataError(f"household ids disagree between features and {name}: {bad}")
    if not ids:
        raise DataError("no households")
    order = sorted(ids)
    fnames = list(features[order[0]])
    for hid in order:
        if list(features[hid]) != fnames:
            raise DataError(f"household {hid}: feature names differ from household {order[0]}")
        bad = [f for f in fnames if not np.isfinite(features[hid][f])]
        if bad:
            raise DataError(f"household {hid}: features without a value: {bad}")
    entries = list(survey_schema.entries) if survey is not None else []
    entries += [Covariate(f, CONTINUOUS) for f in fnames]
    schema = CovariateSchema(tuple(entries))
    raw = {f: [features[h][f] for h in order] for f in fnames}
    if survey is not None:
        for name in survey_schema.names:
            raw[name] = [survey[h][name] for h in order]
    x = schema.expand(raw)
    y = np.array([outcome[h] for h in order], dtype=float)
    d = np.array([treatment[h] for h in order])
    return Dataset(schema, x, y, d, ids=np.array(order, dtype=object))
