"""Synthetic series with known structure, shared by the test modules."""

from __future__ import annotations

import numpy as np
import pandas as pd

from flexcast.timebase import TimeSeries

FOUR_YEARS = 4 * 365 + 1


def tent_series(seed: int, with_break: bool = True, days: int = FOUR_YEARS):
    """Daily trend rising one unit per year then falling at the same rate,
    plus a yearly sinusoid and noise with SD 10% of the signal range.

    Returns the series and the true break instant (the midpoint).
    """
    rng = np.random.default_rng(seed)
    ts = pd.date_range("2016-01-01", periods=days, freq="D")
    ct = np.arange(days) / 365.25
    mid = ct[days // 2]
    trend = np.where(ct < mid, ct, 2 * mid - ct) if with_break else ct
    signal = trend + np.sin(2 * np.pi * ct)
    sd = 0.1 * (signal.max() - signal.min())
    return TimeSeries(ts, signal + rng.normal(0, sd, days), "daily"), ts[days // 2]


def weekly_shift_series(seed: int, with_shift: bool = True, days: int = FOUR_YEARS):
    """Daily series whose weekly amplitude doubles at the midpoint."""
    rng = np.random.default_rng(seed)
    ts = pd.date_range("2016-01-01", periods=days, freq="D")
    dow = (ts.dayofweek.to_numpy() + 1) % 7
    amp = np.where(np.arange(days) < days // 2, 1.0, 2.0) if with_shift else np.ones(days)
    y = 0.5 * np.arange(days) / 365 + amp * np.sin(2 * np.pi * dow / 7) + rng.normal(0, 0.3, days)
    return TimeSeries(ts, y, "daily"), ts[days // 2]


def hourly_ar_series(seed: int, days: int = 200, phi: float = 0.6):
    """Hourly series with daily and weekly seasonality plus a day-level AR(1)
    disturbance (constant within each day) and white hourly noise."""
    rng = np.random.default_rng(seed)
    ts = pd.date_range("2019-01-01", periods=days * 24, freq="h")
    e = np.zeros(days)
    z = rng.normal(0, 1, days)
    for d in range(1, days):
        e[d] = phi * e[d - 1] + z[d]
    tod = ts.hour.to_numpy()
    dow = (ts.dayofweek.to_numpy() + 1) % 7
    y = (
        50
        + 10 * np.sin(2 * np.pi * tod / 24)
        + 3 * np.cos(2 * np.pi * dow / 7)
        + 4 * np.repeat(e, 24)
        + rng.normal(0, 1, len(ts))
    )
    return TimeSeries(ts, y, "hourly")


def dow_sd(dow):
    """Noise SD per day of week (Sunday = 0)."""
    return np.array([0.5, 1.0, 1.0, 1.5, 1.0, 2.0, 3.0])[dow]


def dow_noise_series(seed: int, n: int, start="2000-01-01"):
    """Daily level 10 plus a weekly sinusoid, with DOW-dependent Gaussian noise."""
    rng = np.random.default_rng(seed)
    ts = pd.date_range(start, periods=n, freq="D")
    dow = (ts.dayofweek.to_numpy() + 1) % 7
    mean = 10 + np.sin(2 * np.pi * dow / 7)
    return TimeSeries(ts, mean + rng.normal(0, 1, n) * dow_sd(dow), "daily")
