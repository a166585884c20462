"""Basis-function columns and design-matrix assembly.

Column names follow ``<family>:<detail>`` and are stable across runs, e.g.
``seas:tow:sin1``, ``growth:linear``, ``cp:2016-03-01``,
``event:xmas:cos2``, ``lag:y:24``, ``lag:y:avg[168,336,504]``.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from flexcast.timebase import EventLabel, EventOccurrence, compute_time_features, label_events

PHASE_PERIODS = {"tod": 24.0, "tow": 7.0, "toy": 1.0, "tom": 1.0, "toq": 1.0}
COMPONENT_NAMES = {"tod": "daily", "tow": "weekly", "toy": "yearly", "tom": "monthly", "toq": "quarterly"}
GROWTH_NAMES = {1 / 3: "cbrt", 1 / 2: "sqrt", 1.0: "linear", 2.0: "quadratic", 3.0: "cubic"}

CATEGORICAL_LEVELS = {
    "dow": tuple(range(7)),
    "hour": tuple(range(24)),
    "month": tuple(range(1, 13)),
    "quarter": tuple(range(1, 5)),
    "weekend": (0, 1),
}

# assembly order of provenance families
FAMILY_ORDER = ("intercept", "growth", "changepoint", "seasonality", "event", "interaction", "regressor", "lag")


class FeatureError(ValueError):
    """Invalid feature specification or inputs."""


def format_instant(ts) -> str:
    ts = pd.Timestamp(ts)
    if ts == ts.normalize():
        return ts.strftime("%Y-%m-%d")
    return ts.isoformat()


@dataclass(frozen=True)
class FourierSpec:
    phase_feature: str
    order: int
    period: float | None = None

    def __post_init__(self):
        if self.phase_feature not in PHASE_PERIODS:
            raise FeatureError(f"unknown phase feature {self.phase_feature!r}")
        if self.period is None:
            object.__setattr__(self, "period", PHASE_PERIODS[self.phase_feature])
        if self.period <= 0:
            raise FeatureError("Fourier period must be positive")
        if int(self.order) != self.order or self.order < 1:
            raise FeatureError("Fourier order must be a positive integer")

    @property
    def component(self) -> str:
        return COMPONENT_NAMES[self.phase_feature]


def fourier_terms(phase, spec: FourierSpec, suffix: str = "") -> pd.DataFrame:
    """``sin(k 2pi/P phase)`` and ``cos(k 2pi/P phase)`` for ``k = 1..K``."""
    phase = np.asarray(phase, dtype=float)
    omega = 2 * np.pi / spec.period
    cols = {}
    for k in range(1, spec.order + 1):
        cols[f"seas:{spec.phase_feature}:sin{k}{suffix}"] = np.sin(k * omega * phase)
        cols[f"seas:{spec.phase_feature}:cos{k}{suffix}"] = np.cos(k * omega * phase)
    return pd.DataFrame(cols)


@dataclass
class GrowthSpec:
    """Growth basis ``f(t) = t**exponent`` with continuous changes of slope.

    ``changepoints`` is a list of instants or the string ``"auto"``.
    """

    exponent: float = 1.0
    changepoints: object = field(default_factory=list)

    def __post_init__(self):
        if not any(np.isclose(self.exponent, p) for p in GROWTH_NAMES):
            raise FeatureError(f"growth exponent must be one of 1/3, 1/2, 1, 2, 3; got {self.exponent}")
        if self.changepoints != "auto":
            cps = [pd.Timestamp(c) for c in self.changepoints]
            if any(b <= a for a, b in zip(cps, cps[1:])):
                raise FeatureError("growth changepoints must be strictly increasing")
            self.changepoints = cps

    @property
    def name(self) -> str:
        for p, label in GROWTH_NAMES.items():
            if np.isclose(self.exponent, p):
                return label
        raise AssertionError


def growth_terms(ct, exponent=1.0, changepoint_ct=(), labels=None, span=None) -> pd.DataFrame:
    """``f(ct)`` followed by one hinge ``1{ct > c}(f(ct) - f(c))`` per changepoint.

    ``span`` is the (min, max) continuous time of the training data; when
    given, changepoints outside it are rejected.
    """
    ct = np.asarray(ct, dtype=float)
    changepoint_ct = np.asarray(changepoint_ct, dtype=float)
    if exponent < 1 and np.any(ct < 0):
        raise FeatureError("fractional growth exponents need non-negative continuous time")
    if span is not None and np.any((changepoint_ct < span[0]) | (changepoint_ct > span[1])):
        raise FeatureError("growth changepoint outside the training span")
    if labels is None:
        labels = [f"{c:.6f}" for c in changepoint_ct]
    spec = GrowthSpec(exponent)

    def f(t):
        return np.power(t, exponent) if exponent != 1 else t

    cols = {f"growth:{spec.name}": f(ct)}
    for c, label in zip(changepoint_ct, labels):
        cols[f"cp:{label}"] = np.where(ct > c, f(ct) - f(c), 0.0)
    return pd.DataFrame(cols)


@dataclass(frozen=True)
class EventBasisSpec:
    label: str
    order: int = 1
    include_indicator: bool = True
    expand_before: pd.Timedelta = pd.Timedelta(0)
    expand_after: pd.Timedelta = pd.Timedelta(0)

    def __post_init__(self):
        if self.order < 1:
            raise FeatureError("event order must be >= 1")
        for name in ("expand_before", "expand_after"):
            val = getattr(self, name)
            if isinstance(val, str):
                val = pd.Timedelta(val)
            elif not isinstance(val, pd.Timedelta):
                val = pd.Timedelta(seconds=float(val))
            if val < pd.Timedelta(0):
                raise FeatureError("event expansion must be non-negative")
            object.__setattr__(self, name, val)


def event_basis(timestamps, labels: Sequence[Sequence[EventLabel]], spec: EventBasisSpec) -> pd.DataFrame:
    """Event indicator and Fourier terms over each covering window.

    Inside a window starting at ``t_i`` with length ``l`` the terms are
    ``sin(k 2pi (t - t_i) / l)`` and ``cos(...)``; outside every window all
    columns are zero.
    """
    ts = pd.DatetimeIndex(timestamps)
    n = len(ts)
    inside = np.zeros(n, dtype=bool)
    phase = np.zeros(n)
    for i, row in enumerate(labels):
        for lab in row:
            if lab.label == spec.label:
                inside[i] = True
                phase[i] = (ts[i] - lab.start) / lab.length
                break
    cols = {}
    if spec.include_indicator:
        cols[f"event:{spec.label}:ind"] = inside.astype(float)
    for k in range(1, spec.order + 1):
        cols[f"event:{spec.label}:sin{k}"] = np.where(inside, np.sin(2 * np.pi * k * phase), 0.0)
        cols[f"event:{spec.label}:cos{k}"] = np.where(inside, np.cos(2 * np.pi * k * phase), 0.0)
    return pd.DataFrame(cols)


@dataclass
class LagSpec:
    plain_lags: list[int] = field(default_factory=list)
    agg_groups: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        self.plain_lags = [int(x) for x in self.plain_lags]
        self.agg_groups = [[int(x) for x in g] for g in self.agg_groups]
        if any(lag < 1 for lag in self.all_lags()):
            raise FeatureError("lags must be >= 1")
        if any(len(g) == 0 for g in self.agg_groups):
            raise FeatureError("aggregated lag groups must be non-empty")

    def all_lags(self) -> list[int]:
        return self.plain_lags + [lag for g in self.agg_groups for lag in g]

    @property
    def max_lag(self) -> int:
        return max(self.all_lags(), default=0)

    @property
    def min_lag(self) -> int:
        return min(self.all_lags(), default=0)

    def __bool__(self):
        return bool(self.plain_lags or self.agg_groups)

    @classmethod
    def hourly_default(cls) -> "LagSpec":
        """Same-hour lags one day back, plus three weekly-scale averages."""
        return cls(
            plain_lags=[24, 25, 26],
            agg_groups=[[168, 336, 504], list(range(24, 192)), list(range(192, 360))],
        )


def _group_name(group):
    if len(group) > 2 and group == list(range(group[0], group[-1] + 1)):
        return f"avg[{group[0]}..{group[-1]}]"
    return "avg[" + ",".join(str(g) for g in group) + "]"


def lag_terms(y, spec: LagSpec, rows=None, name: str = "y") -> pd.DataFrame:
    """Lagged and lag-averaged copies of ``y``.

    Row ``t`` of column ``lag:<name>:j`` holds ``y[t - j]``; an averaged
    column holds the mean over its group. Entries whose lags reach before the
    start of ``y`` are NaN. ``rows`` selects the output positions (default:
    every position of ``y``); only ``y[t - j]`` with ``t`` in ``rows`` is read.
    """
    y = np.asanyarray(y)
    n = len(y)
    if spec.max_lag >= n and rows is None:
        raise FeatureError(f"maximum lag {spec.max_lag} must be smaller than the series length {n}")
    rows = np.arange(n) if rows is None else np.asarray(rows, dtype=int)

    def take(lag):
        idx = rows - lag
        out = np.full(len(rows), np.nan)
        ok = idx >= 0
        if np.any(ok):
            out[ok] = np.asarray(y[idx[ok]], dtype=float)
        return out

    cols = {}
    cache: dict[int, np.ndarray] = {}

    def lagged(lag):
        if lag not in cache:
            cache[lag] = take(lag)
        return cache[lag]

    for lag in spec.plain_lags:
        cols[f"lag:{name}:{lag}"] = lagged(lag)
    for group in spec.agg_groups:
        cols[f"lag:{name}:{_group_name(group)}"] = np.mean([lagged(lag) for lag in group], axis=0)
    return pd.DataFrame(cols)


def categorical_codes(raw: pd.DataFrame, name: str) -> np.ndarray:
    """Integer category per row for one of :data:`CATEGORICAL_LEVELS`."""
    idx = pd.DatetimeIndex(raw.index)
    if name == "dow":
        return raw["dow"].to_numpy(dtype=int)
    if name == "hour":
        return np.floor(raw["tod"].to_numpy()).astype(int)
    if name == "month":
        return idx.month.to_numpy()
    if name == "quarter":
        return idx.quarter.to_numpy()
    if name == "weekend":
        return np.isin(raw["dow"].to_numpy(), (0, 6)).astype(int)
    raise FeatureError(f"unknown categorical feature {name!r}")


def one_hot(codes, levels, prefix: str, drop_first=False) -> pd.DataFrame:
    codes = np.asarray(codes)
    use = levels[1:] if drop_first else levels
    return pd.DataFrame({f"{prefix}={lv}": (codes == lv).astype(float) for lv in use})


def interaction(a, b, name_a: str, name_b: str, levels=None) -> pd.DataFrame:
    """Product columns named ``ix:<a>*<b>``.

    With ``levels`` given, ``b`` holds category codes and one column per level
    is produced: ``a`` where ``b == level``, else 0.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b)
    if len(a) != len(b):
        raise FeatureError(f"interaction length mismatch: {len(a)} vs {len(b)}")
    if levels is None:
        return pd.DataFrame({f"ix:{name_a}*{name_b}": a * b.astype(float)})
    return pd.DataFrame({f"ix:{name_a}*{name_b}={lv}": np.where(b == lv, a, 0.0) for lv in levels})


@dataclass
class FeatureMatrix:
    values: np.ndarray
    names: list[str]
    provenance: list[str]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            dup = sorted({n for n in self.names if self.names.count(n) > 1})
            raise FeatureError(f"duplicate column names: {dup}")
        if self.values.shape[1] != len(self.names):
            raise FeatureError("column count does not match names")

    @property
    def shape(self):
        return self.values.shape

    def column(self, name) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def to_frame(self, index=None) -> pd.DataFrame:
        return pd.DataFrame(self.values, columns=self.names, index=index)

    def family(self, tag: str) -> list[int]:
        return [i for i, p in enumerate(self.provenance) if p == tag or p.startswith(tag + ":")]


@dataclass
class DesignContext:
    """Everything besides the model spec needed to featurize arbitrary timestamps."""

    origin: pd.Timestamp
    span: tuple[pd.Timestamp, pd.Timestamp]
    trend_changepoints: list[pd.Timestamp] = field(default_factory=list)
    seasonality_changepoints: list[tuple[str, pd.Timestamp]] = field(default_factory=list)
    events: list[EventOccurrence] = field(default_factory=list)
    drop_first: bool = False


def _family(provenance: str) -> str:
    return provenance.split(":", 1)[0]


def assemble_features(
    timestamps,
    spec,
    ctx: DesignContext,
    regressors: Mapping[str, np.ndarray] | None = None,
    lag_sources: Mapping[str, np.ndarray] | None = None,
    lag_rows=None,
) -> FeatureMatrix:
    """Feature rows for ``timestamps`` under ``spec``.

    ``regressors`` are aligned with ``timestamps``. ``lag_sources`` maps
    ``"y"`` and lagged-regressor names to arrays on a timeline in which the
    output rows sit at positions ``lag_rows``.
    """
    ts = pd.DatetimeIndex(timestamps)
    raw = compute_time_features(ts, ctx.origin)
    ct = raw["ct"].to_numpy()
    blocks: list[tuple[pd.DataFrame, str]] = []
    regressors = regressors or {}

    if spec.intercept:
        blocks.append((pd.DataFrame({"intercept": np.ones(len(ts))}), "intercept"))

    if spec.growth is not None:
        cps = ctx.trend_changepoints
        cp_ct = [float(x) for x in np.atleast_1d(compute_time_features(pd.DatetimeIndex(cps), ctx.origin)["ct"])] if cps else []
        span_ct = tuple(compute_time_features(pd.DatetimeIndex(list(ctx.span)), ctx.origin)["ct"])
        frame = growth_terms(ct, spec.growth.exponent, cp_ct, [format_instant(c) for c in cps], span_ct)
        blocks.append((frame.iloc[:, :1], "growth"))
        if cps:
            blocks.append((frame.iloc[:, 1:], "changepoint"))

    for fs in spec.seasonality:
        terms = fourier_terms(raw[fs.phase_feature].to_numpy(), fs)
        blocks.append((terms, f"seasonality:{fs.component}"))
        for component, instant in ctx.seasonality_changepoints:
            if component != fs.component:
                continue
            after = (ts > instant).astype(float)
            trunc = fourier_terms(raw[fs.phase_feature].to_numpy(), fs, suffix=f"@{format_instant(instant)}")
            blocks.append((trunc.mul(after, axis=0), f"seasonality:{fs.component}"))

    for cat in spec.categoricals:
        codes = categorical_codes(raw, cat)
        blocks.append((one_hot(codes, CATEGORICAL_LEVELS[cat], f"seas:{cat}", ctx.drop_first), f"seasonality:{cat}"))

    if spec.events:
        for es in spec.events:
            labels = label_events(ts, ctx.events, es.expand_before, es.expand_after)
            blocks.append((event_basis(ts, labels, es), f"event:{es.label}"))

    for name in spec.regressors:
        if name not in regressors:
            raise FeatureError(f"missing regressor column {name!r}")
        col = np.asarray(regressors[name], dtype=float)
        if len(col) != len(ts):
            raise FeatureError(f"regressor {name!r} is not aligned with the timestamps")
        blocks.append((pd.DataFrame({f"reg:{name}": col}), "regressor"))

    lag_sources = lag_sources or {}
    if spec.lags:
        blocks.append((lag_terms(lag_sources["y"], spec.lags, lag_rows, "y"), "lag"))
    for name, ls in spec.lagged_regressors:
        if name not in lag_sources:
            raise FeatureError(f"missing lagged regressor column {name!r}")
        blocks.append((lag_terms(lag_sources[name], ls, lag_rows, name), "lag"))

    names = [c for frame, _ in blocks for c in frame.columns]
    prov = [tag for frame, tag in blocks for _ in frame.columns]
    cols = {c: frame[c].to_numpy(dtype=float) for frame, _ in blocks for c in frame.columns}

    ix_frames = []
    for sel_a, sel_b in spec.interactions:
        left = fnmatch.filter(names, sel_a)
        if not left:
            raise FeatureError(f"interaction selector {sel_a!r} matches no column")
        if sel_b in CATEGORICAL_LEVELS:
            codes = categorical_codes(raw, sel_b)
            for a in left:
                ix_frames.append(interaction(cols[a], codes, a, sel_b, CATEGORICAL_LEVELS[sel_b]))
            continue
        right = fnmatch.filter(names, sel_b)
        if not right:
            raise FeatureError(f"interaction selector {sel_b!r} matches no column")
        for a in left:
            for b in right:
                if a != b:
                    ix_frames.append(interaction(cols[a], cols[b], a, b))
    for frame in ix_frames:
        blocks.append((frame, "interaction"))

    blocks.sort(key=lambda blk: FAMILY_ORDER.index(_family(blk[1])))
    names = [c for frame, _ in blocks for c in frame.columns]
    prov = [tag for frame, tag in blocks for _ in frame.columns]
    if not names:
        raise FeatureError("the model spec produces no columns")
    values = np.column_stack([frame[c].to_numpy(dtype=float) for frame, _ in blocks for c in frame.columns])
    return FeatureMatrix(values, names, prov)


@dataclass
class Design:
    """Full feature matrix plus the rows usable for fitting."""

    matrix: FeatureMatrix
    target: np.ndarray
    fit_rows: np.ndarray

    @property
    def X(self) -> np.ndarray:
        return self.matrix.values[self.fit_rows]

    @property
    def y(self) -> np.ndarray:
        return self.target[self.fit_rows]


def build_design_matrix(series, regressors, spec, ctx: DesignContext | None = None) -> Design:
    """Design matrix over the training series.

    Rows with a missing target, missing lag or missing regressor value are
    left out of the fit view; ``fit_rows`` keeps their positions.
    """
    regressors = dict(regressors or {})
    if ctx is None:
        ctx = DesignContext(series.timestamps[0], (series.timestamps[0], series.timestamps[-1]))
    for name in [*spec.regressors, *(n for n, _ in spec.lagged_regressors)]:
        if name not in regressors:
            raise FeatureError(f"missing regressor column {name!r}")
        if len(regressors[name]) != len(series):
            raise FeatureError(f"regressor {name!r} is not aligned with the series")
    if spec.lags and spec.lags.max_lag >= len(series):
        raise FeatureError(f"maximum lag {spec.lags.max_lag} must be smaller than the series length {len(series)}")
    sources = {"y": series.values, **{n: np.asarray(regressors[n], dtype=float) for n, _ in spec.lagged_regressors}}
    matrix = assemble_features(
        series.timestamps, spec, ctx, {n: regressors[n] for n in spec.regressors}, sources, None
    )
    ok = np.isfinite(series.values) & np.all(np.isfinite(matrix.values), axis=1)
    fit_rows = np.flatnonzero(ok)
    if len(fit_rows) == 0:
        raise FeatureError("no usable rows remain after dropping missing targets and lags")
    return Design(matrix, series.values, fit_rows)
