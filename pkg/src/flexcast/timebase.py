"""Timestamps to raw time features and event labels.

All timestamps are naive local time. Raw features follow one convention:
fractional features measure the fraction of the enclosing calendar period
that has elapsed, so ``toy`` is seconds since Jan 1 over seconds in that
calendar year.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
import pandas as pd

SECONDS_PER_DAY = 86400


class Frequency(str, Enum):
    HOURLY = "hourly"
    DAILY = "daily"
    WEEKLY = "weekly"

    @property
    def seconds(self) -> int:
        return {"hourly": 3600, "daily": 86400, "weekly": 7 * 86400}[self.value]

    @property
    def offset(self) -> pd.Timedelta:
        return pd.Timedelta(seconds=self.seconds)

    @classmethod
    def from_seconds(cls, seconds: float) -> "Frequency":
        for freq in cls:
            if freq.seconds == seconds:
                return freq
        raise ValueError(f"unsupported sampling interval of {seconds} seconds")


class TimeSeriesError(ValueError):
    """Structural problem with a series (ordering, spacing, length)."""


@dataclass(frozen=True)
class TimeSeries:
    """Regularly spaced observations ``Y(t)``.

    Missing observations are NaN in ``values``; timestamps are never missing.
    """

    timestamps: pd.DatetimeIndex
    values: np.ndarray
    frequency: Frequency

    def __post_init__(self):
        ts = pd.DatetimeIndex(self.timestamps)
        if ts.tz is not None:
            raise TimeSeriesError("timestamps must be naive local time")
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or len(values) != len(ts):
            raise TimeSeriesError("values must be 1-d and match timestamps in length")
        if len(ts) < 2:
            raise TimeSeriesError("a series needs at least 2 observations")
        steps = np.diff(ts.asi8) / 1e9
        if np.any(steps <= 0):
            bad = int(np.argmax(steps <= 0)) + 1
            raise TimeSeriesError(f"timestamps not strictly increasing at position {bad}")
        freq = Frequency(self.frequency)
        if np.any(steps != freq.seconds):
            bad = int(np.argmax(steps != freq.seconds)) + 1
            raise TimeSeriesError(
                f"irregular spacing at position {bad}: expected {freq.seconds}s steps"
            )
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "frequency", freq)

    def __len__(self) -> int:
        return len(self.timestamps)

    @classmethod
    def from_values(cls, start, values, frequency) -> "TimeSeries":
        freq = Frequency(frequency)
        ts = pd.date_range(pd.Timestamp(start), periods=len(values), freq=freq.offset)
        return cls(ts, np.asarray(values, dtype=float), freq)

    @classmethod
    def infer(cls, timestamps, values) -> "TimeSeries":
        ts = pd.DatetimeIndex(timestamps)
        if len(ts) < 2:
            raise TimeSeriesError("a series needs at least 2 observations")
        step = (ts[1] - ts[0]).total_seconds()
        return cls(ts, values, Frequency.from_seconds(step))

    def slice(self, start: int, stop: int) -> "TimeSeries":
        return TimeSeries(self.timestamps[start:stop], self.values[start:stop], self.frequency)

    def future_timestamps(self, horizon: int) -> pd.DatetimeIndex:
        return pd.date_range(
            self.timestamps[-1] + self.frequency.offset, periods=horizon, freq=self.frequency.offset
        )


def _as_index(timestamps) -> pd.DatetimeIndex:
    if isinstance(timestamps, TimeSeries):
        return timestamps.timestamps
    return pd.DatetimeIndex(timestamps)


def _period_fraction(ts: pd.DatetimeIndex, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    num = (ts.asi8 - starts.astype("datetime64[ns]").astype(np.int64)).astype(float)
    den = (ends.astype("datetime64[ns]").astype(np.int64) - starts.astype("datetime64[ns]").astype(np.int64)).astype(float)
    return num / den


def year_fraction(timestamps) -> np.ndarray:
    ts = _as_index(timestamps)
    years = ts.values.astype("datetime64[Y]")
    return _period_fraction(ts, years, years + 1)


def continuous_time(timestamps, origin) -> np.ndarray:
    """Years elapsed since ``origin``, counting whole calendar years plus the
    fraction of the current one."""
    ts = _as_index(timestamps)
    origin = pd.Timestamp(origin)
    whole = (ts.year.to_numpy() - origin.year).astype(float)
    return whole + (year_fraction(ts) - year_fraction(pd.DatetimeIndex([origin]))[0])


def compute_time_features(series, origin=None) -> pd.DataFrame:
    """Raw time features for every timestamp.

    Parameters
    ----------
    series : TimeSeries or datetime-like sequence
    origin : timestamp, optional
        Reference instant for ``ct``; defaults to the first timestamp.

    Returns
    -------
    DataFrame indexed by timestamp with columns ``tod`` (hours), ``dow``
    (0 = Sunday), ``tow`` (days since Sunday 00:00), ``toy``, ``tom``,
    ``toq`` (fractions of the calendar period) and ``ct`` (years).
    """
    ts = _as_index(series)
    if len(ts) > 1 and np.any(np.diff(ts.asi8) <= 0):
        raise TimeSeriesError("timestamps must be strictly increasing")
    origin = ts[0] if origin is None else pd.Timestamp(origin)
    if len(ts) and origin > ts[0]:
        raise TimeSeriesError("origin must not be after the first timestamp")

    midnight = ts.normalize()
    tod = (ts.asi8 - midnight.asi8) / 3.6e12
    dow = ((ts.dayofweek.to_numpy() + 1) % 7).astype(int)
    tow = dow + tod / 24.0

    months = ts.values.astype("datetime64[M]")
    quarter_start = months - (months.astype(np.int64) % 3)

    return pd.DataFrame(
        {
            "tod": tod,
            "dow": dow,
            "tow": tow,
            "toy": year_fraction(ts),
            "tom": _period_fraction(ts, months, months + 1),
            "toq": _period_fraction(ts, quarter_start, quarter_start + 3),
            "ct": continuous_time(ts, origin),
        },
        index=ts,
    )


@dataclass(frozen=True)
class EventOccurrence:
    label: str
    start: pd.Timestamp
    length: pd.Timedelta

    def __post_init__(self):
        object.__setattr__(self, "start", pd.Timestamp(self.start))
        length = self.length
        if not isinstance(length, pd.Timedelta):
            length = pd.Timedelta(seconds=float(length))
        if length <= pd.Timedelta(0):
            raise ValueError(f"event {self.label!r} at {self.start} has non-positive length")
        object.__setattr__(self, "length", length)


@dataclass(frozen=True)
class EventLabel:
    """An event window covering a timestamp, after expansion."""

    label: str
    start: pd.Timestamp
    length: pd.Timedelta


def validate_event_db(db: Sequence[EventOccurrence]) -> None:
    by_label: dict[str, list[EventOccurrence]] = {}
    for occ in db:
        by_label.setdefault(occ.label, []).append(occ)
    for label, occs in by_label.items():
        occs = sorted(occs, key=lambda o: o.start)
        for prev, nxt in zip(occs, occs[1:]):
            if nxt.start < prev.start + prev.length:
                raise ValueError(
                    f"overlapping occurrences of event {label!r}: {prev.start} and {nxt.start}"
                )


def label_events(
    series,
    db: Sequence[EventOccurrence],
    expand_before=pd.Timedelta(0),
    expand_after=pd.Timedelta(0),
) -> list[list[EventLabel]]:
    """Label each timestamp with the (expanded) event windows covering it.

    A timestamp ``t`` is covered by an occurrence when
    ``start - expand_before <= t < start + length + expand_after``.
    """
    validate_event_db(db)
    ts = _as_index(series)
    before = pd.Timedelta(expand_before)
    after = pd.Timedelta(expand_after)
    out: list[list[EventLabel]] = [[] for _ in range(len(ts))]
    for occ in sorted(db, key=lambda o: (o.label, o.start)):
        lo = occ.start - before
        length = occ.length + before + after
        hi = lo + length
        i0 = ts.searchsorted(lo, side="left")
        i1 = ts.searchsorted(hi, side="left")
        for i in range(i0, i1):
            out[i].append(EventLabel(occ.label, lo, length))
    return out


def load_event_db(path) -> list[EventOccurrence]:
    """Read an event CSV with columns ``label,start,length_seconds``."""
    events = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"label", "start", "length_seconds"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: event file missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                events.append(
                    EventOccurrence(row["label"], pd.Timestamp(row["start"]), float(row["length_seconds"]))
                )
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
    validate_event_db(events)
    return events


@dataclass
class SeriesFrame:
    """A series plus aligned regressor columns, as read from CSV."""

    series: TimeSeries
    regressors: dict[str, np.ndarray] = field(default_factory=dict)


def read_series_csv(path, ts_column="ts", value_column="y", frequency=None) -> SeriesFrame:
    """Read ``ts,y[,regressors...]``; empty ``y`` cells are missing values."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError) as exc:
        raise TimeSeriesError(f"{path}: {exc}") from exc
    for col in (ts_column, value_column):
        if col not in frame.columns:
            raise TimeSeriesError(f"{path}: missing column {col!r}")

    def parse(col, conv, allow_empty):
        out = []
        for lineno, raw in enumerate(frame[col], start=2):
            raw = raw.strip()
            if raw == "" and allow_empty:
                out.append(np.nan)
                continue
            try:
                out.append(conv(raw))
            except (ValueError, TypeError):
                raise TimeSeriesError(f"{path}: line {lineno}: cannot parse {col}={raw!r}") from None
        return out

    timestamps = pd.DatetimeIndex(parse(ts_column, pd.Timestamp, False))
    values = np.array(parse(value_column, float, True))
    regressors = {
        col: np.array(parse(col, float, True))
        for col in frame.columns
        if col not in (ts_column, value_column)
    }
    if frequency is None:
        series = TimeSeries.infer(timestamps, values)
    else:
        series = TimeSeries(timestamps, values, Frequency(frequency))
    return SeriesFrame(series, regressors)
