"""Fit, predict and decompose the conditional mean model.

Prediction is simulation-free: lag features are only ever filled with
observed history, so a model whose smallest lag is ``m`` can forecast at most
``m`` steps ahead. Longer horizons are refused rather than simulated.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from flexcast import solvers
from flexcast.changepoint import (
    ChangepointSet,
    SeasonalityChangepoint,
    detect_seasonality_changepoints,
    detect_trend_changepoints,
)
from flexcast.featurize import DesignContext, FeatureMatrix, assemble_features, build_design_matrix
from flexcast.model_spec import ModelSpec, encode_instant
from flexcast.timebase import EventOccurrence, Frequency, TimeSeries, load_event_db
from flexcast.volatility import VolatilityConfig, VolatilityTable, feature_tuples, fit_volatility, interval

FORMAT_VERSION = 1


class ModelError(ValueError):
    """Invalid use of a fitted model."""


class SimulationFreeError(ModelError):
    """Horizon longer than the smallest lag."""


class MissingRegressorError(ModelError):
    def __init__(self, names):
        self.names = list(names)
        super().__init__(f"future values missing for regressor(s): {', '.join(self.names)}")


def component_family(provenance: str) -> str:
    """Decomposition bucket of a column provenance tag."""
    head = provenance.split(":", 1)[0]
    return {
        "intercept": "intercept",
        "growth": "growth",
        "changepoint": "growth",
        "event": "events",
        "interaction": "interactions",
        "regressor": "regressors",
        "lag": "lags",
    }.get(head, provenance)


@dataclass
class FittedModel:
    """Everything needed to predict without refitting.

    ``history`` is the training target on its regular grid starting at
    ``context.origin``; ``history_regressors`` are the training regressor
    columns on the same grid.
    """

    spec: ModelSpec
    names: list[str]
    provenance: list[str]
    coef: np.ndarray
    context: DesignContext
    frequency: Frequency
    history: np.ndarray
    history_regressors: dict[str, np.ndarray] = field(default_factory=dict)
    trend_changepoints: ChangepointSet | None = None
    seasonality_changepoints: list[SeasonalityChangepoint] = field(default_factory=list)
    volatility: VolatilityTable | None = None
    fit_info: dict = field(default_factory=dict)

    @property
    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.names, self.coef.tolist()))

    @property
    def start(self) -> pd.Timestamp:
        return self.context.origin

    @property
    def n_train(self) -> int:
        return len(self.history)

    @property
    def timestamps(self) -> pd.DatetimeIndex:
        return pd.date_range(self.start, periods=self.n_train, freq=self.frequency.offset)

    def families(self) -> list[str]:
        out: list[str] = []
        for p in self.provenance:
            fam = component_family(p)
            if fam not in out:
                out.append(fam)
        return out

    # persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        ctx = self.context
        tcp = self.trend_changepoints
        return {
            "format_version": FORMAT_VERSION,
            "spec": self.spec.to_dict(),
            "frequency": self.frequency.value,
            "origin": encode_instant(ctx.origin),
            "span": [encode_instant(t) for t in ctx.span],
            "drop_first": ctx.drop_first,
            "trend_changepoints": {
                "instants": [encode_instant(t) for t in tcp.instants],
                "magnitudes": [_num(m) for m in tcp.magnitudes],
                "baseline_slope": _num(tcp.baseline_slope),
            }
            if tcp is not None
            else None,
            "design_trend_changepoints": [encode_instant(t) for t in ctx.trend_changepoints],
            "seasonality_changepoints": [
                {"component": s.component, "instant": encode_instant(s.instant), "magnitude": _num(s.magnitude)}
                for s in self.seasonality_changepoints
            ],
            "design_seasonality_changepoints": [[c, encode_instant(t)] for c, t in ctx.seasonality_changepoints],
            "events": [
                {"label": e.label, "start": encode_instant(e.start), "length": e.length.isoformat()} for e in ctx.events
            ],
            "coefficients": [{"name": n, "provenance": p, "value": _num(v)} for n, p, v in zip(self.names, self.provenance, self.coef.tolist())],
            "history": [_num(v) for v in self.history.tolist()],
            "history_regressors": {k: [_num(v) for v in np.asarray(col, float).tolist()] for k, col in self.history_regressors.items()},
            "volatility": None if self.volatility is None else self.volatility.to_dict(),
            "fit_info": self.fit_info,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FittedModel":
        if data.get("format_version") != FORMAT_VERSION:
            raise ModelError(f"unsupported model document version {data.get('format_version')!r}")
        spec = ModelSpec.from_dict(data["spec"])
        ctx = DesignContext(
            origin=pd.Timestamp(data["origin"]),
            span=tuple(pd.Timestamp(t) for t in data["span"]),
            trend_changepoints=[pd.Timestamp(t) for t in data["design_trend_changepoints"]],
            seasonality_changepoints=[(c, pd.Timestamp(t)) for c, t in data["design_seasonality_changepoints"]],
            events=[EventOccurrence(e["label"], pd.Timestamp(e["start"]), pd.Timedelta(e["length"])) for e in data["events"]],
            drop_first=data["drop_first"],
        )
        tcp = data["trend_changepoints"]
        coefs = data["coefficients"]
        return cls(
            spec=spec,
            names=[c["name"] for c in coefs],
            provenance=[c["provenance"] for c in coefs],
            coef=np.array([_unnum(c["value"]) for c in coefs], dtype=float),
            context=ctx,
            frequency=Frequency(data["frequency"]),
            history=np.array([_unnum(v) for v in data["history"]], dtype=float),
            history_regressors={k: np.array([_unnum(v) for v in col], dtype=float) for k, col in data["history_regressors"].items()},
            trend_changepoints=None
            if tcp is None
            else ChangepointSet(
                [pd.Timestamp(t) for t in tcp["instants"]],
                [_unnum(m) for m in tcp["magnitudes"]],
                _unnum(tcp["baseline_slope"]),
            ),
            seasonality_changepoints=[
                SeasonalityChangepoint(s["component"], pd.Timestamp(s["instant"]), _unnum(s["magnitude"]))
                for s in data["seasonality_changepoints"]
            ],
            volatility=None if data["volatility"] is None else VolatilityTable.from_dict(data["volatility"]),
            fit_info=data["fit_info"],
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True, allow_nan=False)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "FittedModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _num(v):
    """JSON-safe float: non-finite values become null or a tagged string."""
    v = float(v)
    if math.isnan(v):
        return None
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _unnum(v) -> float:
    if v is None:
        return float("nan")
    return float(v)


@dataclass
class ForecastResult:
    timestamps: pd.DatetimeIndex
    yhat: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    coverage: float | None = None
    components: pd.DataFrame | None = None

    def to_frame(self) -> pd.DataFrame:
        out = pd.DataFrame({"ts": self.timestamps, "yhat": self.yhat})
        if self.lower is not None:
            out["yhat_lower"] = self.lower
            out["yhat_upper"] = self.upper
        return out


# fitting -----------------------------------------------------------------


def _resolve_events(spec: ModelSpec, events) -> list[EventOccurrence]:
    if events is not None:
        return list(events)
    if spec.event_db:
        return load_event_db(spec.event_db)
    if spec.events:
        raise ModelError("the model spec uses events but no event database was given")
    return []


def _column_scale(X: np.ndarray) -> np.ndarray:
    s = X.std(axis=0)
    return np.where(s > 0, s, 1.0)


def _solve(spec: ModelSpec, matrix: FeatureMatrix, X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, dict]:
    params = dict(spec.algorithm_params)
    unpenalized = np.array([p == "intercept" for p in matrix.provenance])
    if spec.algorithm == "ols":
        return solvers.fit_ridge(X, y, 0.0, np.zeros(X.shape[1], bool), matrix.names), {}
    if spec.algorithm == "quantile":
        tau = float(params.get("tau", 0.5))
        return solvers.fit_quantile(X, y, tau), {"tau": tau}

    # penalized fits work on unit-variance penalized columns
    scale = np.where(unpenalized, 1.0, _column_scale(X))
    Xs = X / scale
    if spec.algorithm == "ridge":
        lam = float(params.get("lambda2", 1.0))
        coef = solvers.fit_ridge(Xs, y, lam, ~unpenalized, matrix.names)
        return coef / scale, {"lambda2": lam}

    problem = solvers.MixedProblem(Xs[:, unpenalized], Xs[:, ~unpenalized], None, y, 0.0)
    if "lambda1" in params:
        lam = float(params["lambda1"])
    else:
        lam = float(params.get("lambda_fraction", 1e-2)) * solvers.mixed_lambda_max(problem)
    problem.lambda1 = lam
    b0, b1, _ = solvers.fit_mixed_two_step(problem)
    coef = np.empty(X.shape[1])
    coef[unpenalized] = b0
    coef[~unpenalized] = b1
    return coef / scale, {"lambda1": lam}


def fit(
    series: TimeSeries,
    regressors: Mapping[str, np.ndarray] | None = None,
    spec: ModelSpec | None = None,
    events: Sequence[EventOccurrence] | None = None,
    volatility: VolatilityConfig | None = None,
) -> FittedModel:
    """Fit the conditional mean (and optionally the interval model).

    Auto changepoint detection, when requested, runs on the raw series before
    featurization. ``events`` overrides ``spec.event_db``. When
    ``volatility`` is given, in-sample residuals on the fit rows feed
    :func:`flexcast.volatility.fit_volatility`.
    """
    spec = spec or ModelSpec()
    regressors = {k: np.asarray(v, dtype=float) for k, v in (regressors or {}).items()}
    event_db = _resolve_events(spec, events)

    trend_set = None
    trend_cps: list[pd.Timestamp] = []
    if spec.growth is not None:
        if spec.growth.changepoints == "auto":
            trend_set = detect_trend_changepoints(series, spec.trend_changepoint_config)
            trend_cps = list(trend_set.instants)
        else:
            trend_cps = list(spec.growth.changepoints)

    season_found: list[SeasonalityChangepoint] = []
    season_cps: list[tuple[str, pd.Timestamp]] = []
    if spec.seasonality_changepoints == "auto":
        cfg = spec.seasonality_changepoint_config
        if not cfg.components:
            cfg = dataclasses.replace(cfg, components=list(spec.seasonality))
        season_found = detect_seasonality_changepoints(series, cfg, trend_cps)
        season_cps = [(s.component, s.instant) for s in season_found]
    elif spec.seasonality_changepoints != "off":
        season_cps = list(spec.seasonality_changepoints)

    ctx = DesignContext(
        origin=series.timestamps[0],
        span=(series.timestamps[0], series.timestamps[-1]),
        trend_changepoints=trend_cps,
        seasonality_changepoints=season_cps,
        events=event_db,
        drop_first=spec.algorithm in ("ols", "quantile"),
    )
    design = build_design_matrix(series, regressors, spec, ctx)
    X, y = design.X, design.y
    coef, info = _solve(spec, design.matrix, X, y)
    info = {"algorithm": spec.algorithm, "n_fit_rows": int(len(y)), **info}

    used = [*spec.regressors, *(n for n, _ in spec.lagged_regressors)]
    model = FittedModel(
        spec=spec,
        names=list(design.matrix.names),
        provenance=list(design.matrix.provenance),
        coef=coef,
        context=ctx,
        frequency=series.frequency,
        history=series.values.copy(),
        history_regressors={n: regressors[n].copy() for n in dict.fromkeys(used)},
        trend_changepoints=trend_set,
        seasonality_changepoints=season_found,
        fit_info=info,
    )
    if volatility is not None:
        residuals = y - X @ coef
        rows = feature_tuples(series.timestamps[design.fit_rows], volatility.features, event_db)
        model.volatility = fit_volatility(residuals, rows, volatility)
    return model


# prediction --------------------------------------------------------------


def _positions(model: FittedModel, timestamps: pd.DatetimeIndex) -> np.ndarray:
    step = model.frequency.offset.value
    delta = timestamps.asi8 - model.start.value
    if np.any(delta % step != 0) or np.any(delta < 0):
        raise ModelError("timestamps must lie on the model's sampling grid, at or after the training start")
    return (delta // step).astype(int)


def _feature_rows(model, timestamps, positions, regressors, observed) -> FeatureMatrix:
    spec = model.spec
    n = model.n_train
    length = int(positions.max()) + 1 if len(positions) else n
    pad = max(length - n, 0)

    def timeline(values):
        return np.concatenate([np.asarray(values, dtype=float), np.full(pad, np.nan)])

    sources = {"y": observed if observed is not None else timeline(model.history)}
    for name, _ in spec.lagged_regressors:
        sources[name] = timeline(model.history_regressors[name])
    return assemble_features(timestamps, spec, model.context, regressors, sources, positions)


def _components(model: FittedModel, matrix: FeatureMatrix, timestamps) -> pd.DataFrame:
    contrib = matrix.values * model.coef
    out = {}
    for fam in model.families():
        cols = [i for i, p in enumerate(model.provenance) if component_family(p) == fam]
        out[fam] = contrib[:, cols].sum(axis=1)
    return pd.DataFrame(out, index=pd.DatetimeIndex(timestamps, name="ts"))


def _check_columns(model: FittedModel, matrix: FeatureMatrix):
    if matrix.names != model.names:
        raise ModelError("feature columns at prediction time differ from the fitted columns")


def check_horizon(spec: ModelSpec, horizon) -> int:
    """Validate ``horizon`` against the simulation-free limit of ``spec``."""
    horizon = int(horizon)
    if horizon < 1:
        raise ModelError("horizon must be >= 1")
    if spec.uses_lags() and horizon > spec.min_lag():
        m = spec.min_lag()
        raise SimulationFreeError(
            f"horizon {horizon} exceeds the smallest lag {m}: lag features would need values that are not "
            f"observed yet and forecasts are never simulated. Use a horizon of at most {m}, "
            f"or refit with all lags >= {horizon}."
        )
    return horizon


def predict(
    model: FittedModel,
    horizon: int,
    future_regressors: Mapping[str, np.ndarray] | None = None,
    *,
    observed=None,
) -> ForecastResult:
    """Forecast ``horizon`` steps past the end of the training data.

    Parameters
    ----------
    model : FittedModel
    horizon : int
        Number of future periods; must not exceed the model's smallest lag.
    future_regressors : mapping, optional
        Future values (length ``horizon``) for every regressor column.
    observed : array-like, optional
        Target values on the timeline of training history followed by the
        horizon, used in place of the stored history when reading lags.
        Intended for instrumentation; any index-recording array works.
    """
    horizon = check_horizon(model.spec, horizon)
    spec = model.spec
    future_regressors = dict(future_regressors or {})
    missing = [n for n in spec.regressors if n not in future_regressors]
    if missing:
        raise MissingRegressorError(missing)
    regs = {}
    for name in spec.regressors:
        col = np.asarray(future_regressors[name], dtype=float)
        if len(col) != horizon:
            raise ModelError(f"regressor {name!r} has {len(col)} future values; expected {horizon}")
        regs[name] = col

    ts = pd.date_range(model.start + model.n_train * model.frequency.offset, periods=horizon, freq=model.frequency.offset)
    positions = np.arange(model.n_train, model.n_train + horizon)
    matrix = _feature_rows(model, ts, positions, regs, observed)
    _check_columns(model, matrix)
    components = _components(model, matrix, ts)
    raw = matrix.values @ model.coef
    yhat = np.maximum(raw, 0.0) if spec.clip_at_zero else raw

    lower = upper = None
    coverage = None
    if model.volatility is not None:
        vcfg = model.volatility.config
        rows = feature_tuples(ts, vcfg.features, model.context.events)
        lower, upper = interval(model.volatility, yhat, rows)
        if spec.clip_at_zero:
            lower, upper = np.maximum(lower, 0.0), np.maximum(upper, 0.0)
        # keep the point inside its interval even for skewed residual groups
        lower, upper = np.minimum(lower, yhat), np.maximum(upper, yhat)
        coverage = vcfg.coverage
    return ForecastResult(ts, yhat, lower, upper, coverage, components)


def decompose(model: FittedModel, timestamps, regressors: Mapping[str, np.ndarray] | None = None) -> pd.DataFrame:
    """Additive contribution of each component family at ``timestamps``.

    Rows sum to the unclipped forecast. Regressor values default to the
    training values for timestamps inside the training span.
    """
    ts = pd.DatetimeIndex(timestamps)
    positions = _positions(model, ts)
    regs = {}
    for name in model.spec.regressors:
        if regressors is not None and name in regressors:
            regs[name] = np.asarray(regressors[name], dtype=float)
        elif np.all(positions < model.n_train):
            regs[name] = model.history_regressors[name][positions]
        else:
            raise MissingRegressorError([name])
    matrix = _feature_rows(model, ts, positions, regs, None)
    _check_columns(model, matrix)
    return _components(model, matrix, ts)


def fitted_values(model: FittedModel) -> np.ndarray:
    """Unclipped in-sample predictions over the training grid."""
    return decompose(model, model.timestamps).sum(axis=1, skipna=False).to_numpy()


__all__ = [
    "FittedModel",
    "ForecastResult",
    "MissingRegressorError",
    "ModelError",
    "SimulationFreeError",
    "check_horizon",
    "component_family",
    "decompose",
    "fit",
    "fitted_values",
    "predict",
]
