"""Automatic trend and seasonality changepoint detection.

Trend detection regresses the (optionally aggregated) series on a baseline
slope, yearly Fourier terms and a dense grid of hinge terms
``1{t > t_i} (t - t_i)``. Only the hinges are penalized, with adaptive L1
weights, and the surviving hinges are thinned by a minimum-distance filter.
Seasonality detection works the same way with truncated Fourier terms
``1{t > t_i} s_k(t)`` in place of hinges.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.stats

from flexcast import solvers
from flexcast.featurize import FourierSpec, fourier_terms, format_instant
from flexcast.timebase import Frequency, TimeSeries, compute_time_features

logger = logging.getLogger(__name__)

DAY = pd.Timedelta(days=1)


class ChangepointError(ValueError):
    pass


def _td(value) -> pd.Timedelta | None:
    if value is None or isinstance(value, pd.Timedelta):
        return value
    if isinstance(value, str):
        return pd.Timedelta(value)
    return pd.Timedelta(seconds=float(value))


@dataclass
class TrendCpConfig:
    """Knobs of trend changepoint detection.

    Durations accept ``pd.Timedelta``, strings such as ``"15D"`` or seconds.
    ``aggregation_window`` counts base periods; ``None`` means three days'
    worth for hourly and daily data and no aggregation for weekly data.
    ``forbidden_head`` defaults to one ``candidate_spacing``.
    ``noise_alpha`` raises the penalty to a noise-calibrated floor so that a
    series without changes yields no detections with probability about
    ``1 - noise_alpha``; ``None`` uses ``lambda_fraction * lambda_max`` alone.
    ``adaptive_ridge`` scales the ridge penalty of the initial estimate that
    sets the adaptive weights, relative to the mean squared column norm.
    """

    aggregation_window: int | None = None
    candidate_spacing: pd.Timedelta = pd.Timedelta(days=15)
    forbidden_tail: pd.Timedelta = pd.Timedelta(days=30)
    forbidden_head: pd.Timedelta | None = None
    yearly_order: int = 15
    seasonality_refit_every: pd.Timedelta | None = None
    lambda_fraction: float = 1e-3
    min_distance: pd.Timedelta = pd.Timedelta(0)
    custom_changepoints: list = field(default_factory=list)
    min_distance_to_custom: pd.Timedelta = pd.Timedelta(0)
    adaptive_gamma: float = 1.0
    adaptive_epsilon: float = 1e-8
    noise_alpha: float | None = 0.05
    adaptive_ridge: float = 0.1

    def __post_init__(self):
        for name in ("candidate_spacing", "forbidden_tail", "forbidden_head", "seasonality_refit_every",
                     "min_distance", "min_distance_to_custom"):
            setattr(self, name, _td(getattr(self, name)))
        if self.forbidden_head is None:
            self.forbidden_head = self.candidate_spacing
        self.custom_changepoints = [pd.Timestamp(c) for c in self.custom_changepoints]
        if self.candidate_spacing <= pd.Timedelta(0):
            raise ChangepointError("candidate_spacing must be positive")
        if not 0 < self.lambda_fraction <= 1:
            raise ChangepointError("lambda_fraction must lie in (0, 1]")
        if self.min_distance < pd.Timedelta(0) or self.min_distance_to_custom < pd.Timedelta(0):
            raise ChangepointError("minimum distances must be non-negative")


@dataclass
class ChangepointSet:
    instants: list[pd.Timestamp]
    magnitudes: list[float]
    baseline_slope: float = float("nan")

    def __post_init__(self):
        self.instants = [pd.Timestamp(t) for t in self.instants]
        self.magnitudes = [float(m) for m in self.magnitudes]
        if len(self.instants) != len(self.magnitudes):
            raise ChangepointError("one magnitude per instant required")
        order = np.argsort(np.asarray(self.instants, dtype="datetime64[ns]"), kind="stable")
        self.instants = [self.instants[i] for i in order]
        self.magnitudes = [self.magnitudes[i] for i in order]

    def __len__(self):
        return len(self.instants)


@dataclass
class SeasonalityCpConfig:
    """Knobs of seasonality changepoint detection.

    Candidates share the trend grid construction; the tail window defaults to
    365 days. No aggregation is applied by default since it would average out
    sub-window seasonality. ``noise_alpha`` and ``adaptive_ridge`` act as in
    :class:`TrendCpConfig`.
    """

    components: list[FourierSpec] = field(default_factory=list)
    aggregation_window: int | None = 1
    candidate_spacing: pd.Timedelta = pd.Timedelta(days=15)
    forbidden_tail: pd.Timedelta = pd.Timedelta(days=365)
    forbidden_head: pd.Timedelta | None = None
    lambda_fraction: float = 1e-3
    min_distance: pd.Timedelta = pd.Timedelta(0)
    adaptive_gamma: float = 1.0
    adaptive_epsilon: float = 1e-8
    noise_alpha: float | None = 0.05
    adaptive_ridge: float = 0.1

    def __post_init__(self):
        for name in ("candidate_spacing", "forbidden_tail", "forbidden_head", "min_distance"):
            setattr(self, name, _td(getattr(self, name)))
        if self.forbidden_head is None:
            self.forbidden_head = self.candidate_spacing
        if self.candidate_spacing <= pd.Timedelta(0):
            raise ChangepointError("candidate_spacing must be positive")
        if not 0 < self.lambda_fraction <= 1:
            raise ChangepointError("lambda_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class SeasonalityChangepoint:
    component: str
    instant: pd.Timestamp
    magnitude: float


def default_aggregation(frequency: Frequency) -> int:
    return {Frequency.HOURLY: 72, Frequency.DAILY: 3, Frequency.WEEKLY: 1}[Frequency(frequency)]


def aggregate(series: TimeSeries, window: int) -> tuple[pd.DatetimeIndex, np.ndarray]:
    """Means over non-overlapping windows anchored at the series start.

    The partial final window is dropped and each aggregate is stamped at the
    centre of its window. Missing values are ignored; all-missing windows are
    dropped.
    """
    if window < 1:
        raise ChangepointError("aggregation window must be >= 1")
    if window == 1:
        keep = np.isfinite(series.values)
        return series.timestamps[keep], series.values[keep]
    m = len(series) // window
    if m == 0:
        raise ChangepointError("series shorter than one aggregation window")
    blocks = series.values[: m * window].reshape(m, window)
    counts = np.sum(np.isfinite(blocks), axis=1)
    sums = np.nansum(blocks, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts
    step = series.frequency.offset
    centres = series.timestamps[: m * window : window] + step * ((window - 1) / 2)
    keep = counts > 0
    return pd.DatetimeIndex(centres[keep]), means[keep]


def candidate_grid(start, end, spacing, head, tail) -> list[pd.Timestamp]:
    """Instants ``start + k * spacing`` with ``>= start + head`` and strictly
    before ``end - tail``."""
    out = []
    k = 0
    while True:
        c = start + k * spacing
        if c >= end - tail:
            break
        if c >= start + head:
            out.append(c)
        k += 1
    return out


def _ct(instants, origin) -> np.ndarray:
    if len(instants) == 0:
        return np.zeros(0)
    return compute_time_features(pd.DatetimeIndex(instants), origin)["ct"].to_numpy()


def _yearly_block(agg_ts, order, refit_boundaries):
    raw = compute_time_features(agg_ts, agg_ts[0])
    base = fourier_terms(raw["toy"].to_numpy(), FourierSpec("toy", order)).to_numpy()
    blocks = [base]
    for b in refit_boundaries:
        blocks.append(base * np.asarray(agg_ts > b)[:, None])
    return np.hstack(blocks)


def noise_scale(X0, y) -> float:
    """Robust noise SD: MAD of first differences of the residuals after the
    unpenalized fit, divided by sqrt(2)."""
    coef, *_ = np.linalg.lstsq(X0, y, rcond=None)
    d = np.diff(y - X0 @ coef)
    if d.size == 0:
        return 0.0
    return float(np.median(np.abs(d - np.median(d))) / scipy.stats.norm.ppf(0.75) / np.sqrt(2))


def _solve_adaptive(X0, X1, y, config):
    """Adaptive-lasso fit penalizing only ``X1``; returns (b0, b1, lambda1).

    ``lambda1 = lambda_fraction * lambda_max``, raised when ``noise_alpha`` is
    set to the level at which pure noise leaves every penalized coefficient at
    zero with probability at least ``1 - noise_alpha`` (Bonferroni over the
    columns).
    """
    lambda_fraction, alpha = config.lambda_fraction, config.noise_alpha
    mask = np.r_[np.zeros(X0.shape[1], bool), np.ones(X1.shape[1], bool)]
    X = np.hstack([X0, X1])
    # neighbouring hinges are nearly collinear; a firm ridge keeps the initial
    # estimate concentrated where the slope actually changes
    lambda2 = config.adaptive_ridge * float(np.sum(X1 * X1)) / max(X1.shape[1], 1)
    weights = solvers.adaptive_weights(
        X, y, config.adaptive_gamma, config.adaptive_epsilon, mask, lambda2
    )[mask]
    problem = solvers.MixedProblem(X0, X1, None, y, 0.0, 0.0, weights)
    red = solvers.reduce_mixed(problem)
    n_rows = red.X.shape[0]
    lam_max = solvers.lambda_max(red.X, red.y, weights)
    scale = float(np.sqrt(np.mean(red.y**2)))
    col_scale = float(np.max(np.linalg.norm(red.X, axis=0) / weights)) / n_rows
    if lam_max <= 1e-12 * scale * col_scale:
        # nothing left to explain after the unpenalized fit
        return scipy.linalg.cho_solve(red.gram_factor, X0.T @ y), np.zeros(X1.shape[1]), 0.0
    lam = lambda_fraction * lam_max
    if alpha is not None:
        z = scipy.stats.norm.ppf(1 - alpha / (2 * X1.shape[1]))
        floor = z * noise_scale(X0, y) * col_scale
        lam = max(lam, floor)
    b1 = solvers.fit_lasso_cd(red.X, red.y, lam, weights)
    b0 = scipy.linalg.cho_solve(red.gram_factor, X0.T @ (y - X1 @ b1))
    return b0, b1, lam


def post_filter(candidates: ChangepointSet, min_distance) -> ChangepointSet:
    """Enforce a minimum gap between changepoints, keeping larger changes.

    Points closer than ``min_distance`` to a neighbour are grouped. Within a
    group each point is compared with the latest kept point and the one with
    the smaller ``|magnitude|`` is dropped (ties keep the earlier point).
    After every comparison, dropped points that are now at least
    ``min_distance`` from all kept points are restored.
    """
    d = _td(min_distance)
    inst, mags = candidates.instants, candidates.magnitudes
    if len(inst) < 2 or d <= pd.Timedelta(0):
        return ChangepointSet(list(inst), list(mags), candidates.baseline_slope)

    groups = [[0]]
    for i in range(1, len(inst)):
        if inst[i] - inst[i - 1] < d:
            groups[-1].append(i)
        else:
            groups.append([i])

    final: list[int] = []
    for group in groups:
        kept: list[int] = []
        dropped: list[int] = []

        def far(i):
            return all(abs(inst[i] - inst[k]) >= d for k in kept)

        for i in group:
            while kept and inst[i] - inst[kept[-1]] < d and abs(mags[i]) > abs(mags[kept[-1]]):
                dropped.append(kept.pop())
            if kept and inst[i] - inst[kept[-1]] < d:
                dropped.append(i)
            else:
                kept.append(i)
            restored = True
            while restored:
                restored = False
                for j in sorted(dropped):
                    if far(j):
                        dropped.remove(j)
                        kept.append(j)
                        kept.sort()
                        restored = True
                        break
        final.extend(kept)
    final.sort()
    return ChangepointSet([inst[i] for i in final], [mags[i] for i in final], candidates.baseline_slope)


def merge_custom(detected: ChangepointSet, custom, min_distance_to_custom) -> ChangepointSet:
    """Add user-supplied changepoints, dropping detections too close to them."""
    custom = [pd.Timestamp(c) for c in custom]
    if not custom:
        return detected
    d = _td(min_distance_to_custom)
    inst, mags = [], []
    for t, m in zip(detected.instants, detected.magnitudes):
        if any(abs(t - c) < d or t == c for c in custom):
            continue
        inst.append(t)
        mags.append(m)
    inst += custom
    mags += [float("nan")] * len(custom)
    return ChangepointSet(inst, mags, detected.baseline_slope)


def detect_trend_changepoints(series: TimeSeries, config: TrendCpConfig | None = None) -> ChangepointSet:
    """Detect changes of trend slope.

    Pipeline: aggregate, lay a candidate grid outside the forbidden head and
    tail, regress on ``[1, t, yearly terms, hinges]`` with adaptive L1 on the
    hinges only at ``lambda_fraction * lambda_max``, keep nonzero hinges,
    post-filter, then merge custom changepoints.
    """
    config = config or TrendCpConfig()
    window = config.aggregation_window or default_aggregation(series.frequency)
    agg_ts, y = aggregate(series, window)
    origin = series.timestamps[0]
    start, end = series.timestamps[0], series.timestamps[-1]

    cands = candidate_grid(start, end, config.candidate_spacing, config.forbidden_head, config.forbidden_tail)
    cands = [c for c in cands if c < agg_ts[-1]]
    if len(cands) < 2:
        raise ChangepointError(
            f"only {len(cands)} candidate changepoint(s) fit between the forbidden head and tail; "
            "use a longer series or a finer candidate_spacing"
        )

    t = _ct(agg_ts, origin)
    refits = []
    if config.seasonality_refit_every is not None:
        every = config.seasonality_refit_every
        refits = candidate_grid(start, end, every, every, pd.Timedelta(0))
    X0 = np.column_stack([np.ones(len(t)), t, _yearly_block(agg_ts, config.yearly_order, refits)])
    cand_t = _ct(cands, origin)
    X1 = np.maximum(t[:, None] - cand_t[None, :], 0.0)

    b0, b1, _ = _solve_adaptive(X0, X1, y, config)
    nz = np.flatnonzero(b1)
    found = ChangepointSet([cands[i] for i in nz], np.abs(b1[nz]), float(b0[1]))
    logger.debug("trend detection kept %d of %d candidates before filtering", len(nz), len(cands))
    filtered = post_filter(found, config.min_distance)
    return merge_custom(filtered, config.custom_changepoints, config.min_distance_to_custom)


def detect_seasonality_changepoints(
    series: TimeSeries,
    config: SeasonalityCpConfig,
    trend_changepoints=(),
) -> list[SeasonalityChangepoint]:
    """Detect changes in the shape of each seasonal component.

    Trend hinges at ``trend_changepoints`` and the full Fourier blocks enter
    unpenalized; every truncated term ``1{t > t_i} s_k``/``c_k`` gets an
    adaptive L1 penalty. A component reports a changepoint at ``t_i`` when any
    of its truncated terms there is nonzero; the magnitude is the Euclidean
    norm of those coefficients.
    """
    if not config.components:
        return []
    window = config.aggregation_window or 1
    agg_ts, y = aggregate(series, window)
    origin = series.timestamps[0]
    start, end = series.timestamps[0], series.timestamps[-1]
    cands = candidate_grid(start, end, config.candidate_spacing, config.forbidden_head, config.forbidden_tail)
    cands = [c for c in cands if c < agg_ts[-1]]
    if not cands:
        raise ChangepointError("no seasonality changepoint candidates outside the forbidden windows")

    raw = compute_time_features(agg_ts, origin)
    t = raw["ct"].to_numpy()
    trend_instants = list(getattr(trend_changepoints, "instants", trend_changepoints))
    hinge_t = _ct(trend_instants, origin)
    cols0 = [np.ones(len(t)), t] + [np.maximum(t - h, 0.0) for h in hinge_t]
    X0 = np.column_stack(cols0)
    fourier = [fourier_terms(raw[c.phase_feature].to_numpy(), c).to_numpy() for c in config.components]
    X0 = np.hstack([X0, *fourier])

    blocks, owners = [], []
    for ci, comp in enumerate(config.components):
        for cj, c in enumerate(cands):
            after = np.asarray(agg_ts > c)[:, None]
            blocks.append(fourier[ci] * after)
            owners += [(ci, cj)] * fourier[ci].shape[1]
    X1 = np.hstack(blocks)

    _, b1, _ = _solve_adaptive(X0, X1, y, config)
    out: list[SeasonalityChangepoint] = []
    owners = np.array(owners)
    for ci, comp in enumerate(config.components):
        inst, mags = [], []
        for cj, c in enumerate(cands):
            sel = (owners[:, 0] == ci) & (owners[:, 1] == cj)
            coef = b1[sel]
            if np.any(coef != 0):
                inst.append(c)
                mags.append(float(np.linalg.norm(coef)))
        kept = post_filter(ChangepointSet(inst, mags), config.min_distance)
        out += [SeasonalityChangepoint(comp.component, i, m) for i, m in zip(kept.instants, kept.magnitudes)]
    return out


__all__ = [
    "ChangepointError",
    "ChangepointSet",
    "SeasonalityChangepoint",
    "SeasonalityCpConfig",
    "TrendCpConfig",
    "aggregate",
    "candidate_grid",
    "detect_seasonality_changepoints",
    "detect_trend_changepoints",
    "format_instant",
    "merge_custom",
    "post_filter",
]
