"""Prediction intervals from residual quantiles per feature combination.

Residuals of the mean model are grouped by a tuple of categorical features
(for example day of week and an event flag). Each combination with enough
residuals gets its own quantile offsets. Smaller combinations borrow the
offsets of a fallback combination chosen high in the ordering by
interquartile range, so sparse groups get deliberately wide intervals.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.stats

from flexcast.featurize import categorical_codes
from flexcast.timebase import EventOccurrence, compute_time_features, label_events

logger = logging.getLogger(__name__)

VOLATILITY_FEATURES = ("dow", "hour", "month", "quarter", "weekend", "is_event")
DISTRIBUTIONS = ("empirical", "gaussian_zero_mean")


class VolatilityError(ValueError):
    pass


@dataclass
class VolatilityConfig:
    features: list[str] = field(default_factory=lambda: ["dow"])
    min_samples: int = 20
    fallback_percentile: float = 0.9
    coverage: float = 0.95
    distribution: str = "empirical"

    def __post_init__(self):
        self.features = list(self.features)
        bad = [f for f in self.features if f not in VOLATILITY_FEATURES]
        if bad:
            raise VolatilityError(f"unknown volatility feature(s) {bad}; allowed: {list(VOLATILITY_FEATURES)}")
        if self.min_samples < 2:
            raise VolatilityError("min_samples must be >= 2")
        if not 0 < self.fallback_percentile < 1:
            raise VolatilityError("fallback_percentile must lie in (0, 1)")
        if not 0 < self.coverage < 1:
            raise VolatilityError("coverage must lie in (0, 1)")
        if self.distribution not in DISTRIBUTIONS:
            raise VolatilityError(f"distribution must be one of {DISTRIBUTIONS}")

    @property
    def levels(self) -> tuple[float, float]:
        return (1 - self.coverage) / 2, (1 + self.coverage) / 2

    def to_dict(self) -> dict:
        return {
            "features": list(self.features),
            "min_samples": self.min_samples,
            "fallback_percentile": self.fallback_percentile,
            "coverage": self.coverage,
            "distribution": self.distribution,
        }


@dataclass(frozen=True)
class VolatilityRecord:
    key: tuple
    size: int
    lower: float
    upper: float
    iqr: float
    fallback: bool = False


def _encode_key(key: tuple) -> str:
    return "|".join(str(k) for k in key)


def _decode_key(text: str) -> tuple:
    return tuple(int(k) for k in text.split("|")) if text else ()


@dataclass
class VolatilityTable:
    """Quantile offsets per combination plus the fallback offsets."""

    config: VolatilityConfig
    records: dict[tuple, VolatilityRecord]
    fallback_key: tuple
    fallback_lower: float
    fallback_upper: float

    def bounds(self, key: tuple) -> tuple[float, float, bool]:
        """Offsets for ``key``; the flag is True when the key was never seen."""
        rec = self.records.get(tuple(key))
        if rec is None:
            return self.fallback_lower, self.fallback_upper, True
        return rec.lower, rec.upper, False

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "records": [
                {
                    "key": _encode_key(r.key),
                    "size": r.size,
                    "lower": r.lower,
                    "upper": r.upper,
                    "iqr": None if math.isnan(r.iqr) else r.iqr,
                    "fallback": r.fallback,
                }
                for r in self.records.values()
            ],
            "fallback": {"key": _encode_key(self.fallback_key), "lower": self.fallback_lower, "upper": self.fallback_upper},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "VolatilityTable":
        records = {}
        for r in data["records"]:
            key = _decode_key(r["key"])
            iqr = float("nan") if r["iqr"] is None else r["iqr"]
            records[key] = VolatilityRecord(key, r["size"], r["lower"], r["upper"], iqr, r["fallback"])
        fb = data["fallback"]
        return cls(VolatilityConfig(**data["config"]), records, _decode_key(fb["key"]), fb["lower"], fb["upper"])


def feature_tuples(timestamps, features: Sequence[str], events: Sequence[EventOccurrence] = ()) -> list[tuple]:
    """Per-timestamp category tuple for the requested volatility features."""
    ts = pd.DatetimeIndex(timestamps)
    raw = compute_time_features(ts)
    cols = []
    for name in features:
        if name == "is_event":
            labels = label_events(ts, list(events))
            cols.append(np.array([1 if row else 0 for row in labels]))
        elif name in VOLATILITY_FEATURES:
            cols.append(categorical_codes(raw, name))
        else:
            raise VolatilityError(f"unknown volatility feature {name!r}")
    if not cols:
        return [()] * len(ts)
    return [tuple(int(v) for v in row) for row in zip(*cols)]


def _offsets(r: np.ndarray, config: VolatilityConfig) -> tuple[float, float]:
    lo, hi = config.levels
    if config.distribution == "empirical":
        q = np.quantile(r, [lo, hi], method="linear")
        return float(q[0]), float(q[1])
    sigma = float(np.sqrt(np.mean(r * r)))
    z = scipy.stats.norm.ppf(hi)
    return -z * sigma, z * sigma


def fit_volatility(residuals, features: Sequence[tuple], config: VolatilityConfig | None = None) -> VolatilityTable:
    """Quantile offsets of ``residuals`` per feature combination.

    Combinations with at least ``min_samples`` residuals are "large". Large
    combinations are ordered by ascending interquartile range (ties: larger
    sample first, then key) and the one at position
    ``ceil(fallback_percentile * m) - 1`` supplies the fallback offsets used
    for every small combination and for unseen combinations at predict time.
    Empirical quantiles interpolate linearly between order statistics.
    """
    config = config or VolatilityConfig()
    r = np.asarray(residuals, dtype=float)
    if len(r) != len(features):
        raise VolatilityError("residuals and feature tuples differ in length")
    if not np.all(np.isfinite(r)):
        raise VolatilityError("residuals must be finite")
    groups: dict[tuple, list[int]] = {}
    for i, key in enumerate(features):
        groups.setdefault(tuple(key), []).append(i)

    large = {}
    for key in sorted(groups):
        idx = groups[key]
        if len(idx) >= config.min_samples:
            vals = r[idx]
            q25, q75 = np.quantile(vals, [0.25, 0.75], method="linear")
            lower, upper = _offsets(vals, config)
            large[key] = VolatilityRecord(key, len(idx), lower, upper, float(q75 - q25))
    if not large:
        raise VolatilityError(
            f"no feature combination has at least {config.min_samples} residuals; "
            "use fewer or coarser volatility features"
        )
    ranked = sorted(large.values(), key=lambda rec: (rec.iqr, -rec.size, rec.key))
    c0 = ranked[math.ceil(config.fallback_percentile * len(ranked)) - 1]

    records = dict(large)
    for key in sorted(groups):
        if key not in large:
            records[key] = VolatilityRecord(key, len(groups[key]), c0.lower, c0.upper, float("nan"), True)
    return VolatilityTable(config, records, c0.key, c0.lower, c0.upper)


def interval(table: VolatilityTable, point_forecasts, feature_rows: Sequence[tuple], coverage: float | None = None):
    """Lower and upper interval bounds around ``point_forecasts``."""
    if coverage is not None and not np.isclose(coverage, table.config.coverage):
        raise VolatilityError(
            f"table was fitted for coverage {table.config.coverage}, not {coverage}; refit the volatility model"
        )
    point = np.asarray(point_forecasts, dtype=float)
    if len(point) != len(feature_rows):
        raise VolatilityError("point forecasts and feature tuples differ in length")
    lower = np.empty_like(point)
    upper = np.empty_like(point)
    unseen = set()
    for i, key in enumerate(feature_rows):
        lo, hi, missing = table.bounds(key)
        if missing:
            unseen.add(tuple(key))
        lower[i] = point[i] + lo
        upper[i] = point[i] + hi
    if unseen:
        logger.warning(
            "volatility combination(s) %s unseen in training; using fallback bounds of %s",
            sorted(unseen),
            table.fallback_key,
        )
    return lower, upper


__all__ = [
    "VOLATILITY_FEATURES",
    "VolatilityConfig",
    "VolatilityError",
    "VolatilityRecord",
    "VolatilityTable",
    "feature_tuples",
    "fit_volatility",
    "interval",
]
