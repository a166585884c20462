"""Model specification and its JSON-compatible document form.

A :class:`ModelSpec` names every model-form choice: growth, seasonality,
categorical dummies, events, autoregressive lags, external regressors,
interactions and the fitting algorithm. ``to_dict``/``from_dict`` mirror the
field names one-to-one so a config file can be written by hand.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import pandas as pd

from flexcast.changepoint import SeasonalityCpConfig, TrendCpConfig
from flexcast.featurize import CATEGORICAL_LEVELS, EventBasisSpec, FourierSpec, GrowthSpec, LagSpec

ALGORITHMS = ("ols", "ridge", "lasso", "quantile")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration document."""


def encode_duration(td: pd.Timedelta | None):
    return None if td is None else pd.Timedelta(td).isoformat()


def encode_instant(ts) -> str:
    return pd.Timestamp(ts).isoformat()


def _check_keys(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {unknown}; allowed: {sorted(known)}")


def _build(cls, data: dict, where: str, **converted):
    _check_keys(cls, data, where)
    kwargs = {**data, **converted}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def fourier_to_dict(spec: FourierSpec) -> dict:
    return {"phase_feature": spec.phase_feature, "order": spec.order, "period": spec.period}


def fourier_from_dict(data, where="seasonality") -> FourierSpec:
    return _build(FourierSpec, data, where)


def lags_to_dict(spec: LagSpec) -> dict:
    return {"plain_lags": list(spec.plain_lags), "agg_groups": [list(g) for g in spec.agg_groups]}


def lags_from_dict(data, where="lags") -> LagSpec:
    if data == "hourly_default":
        return LagSpec.hourly_default()
    return _build(LagSpec, data, where)


def event_to_dict(spec: EventBasisSpec) -> dict:
    return {
        "label": spec.label,
        "order": spec.order,
        "include_indicator": spec.include_indicator,
        "expand_before": encode_duration(spec.expand_before),
        "expand_after": encode_duration(spec.expand_after),
    }


def trend_config_to_dict(cfg: TrendCpConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        if isinstance(val, pd.Timedelta):
            val = encode_duration(val)
        elif f.name == "custom_changepoints":
            val = [encode_instant(c) for c in val]
        out[f.name] = val
    return out


def trend_config_from_dict(data, where="trend_changepoint_config") -> TrendCpConfig:
    return _build(TrendCpConfig, data, where)


def seasonality_config_to_dict(cfg: SeasonalityCpConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        if isinstance(val, pd.Timedelta):
            val = encode_duration(val)
        elif f.name == "components":
            val = [fourier_to_dict(c) for c in val]
        out[f.name] = val
    return out


def seasonality_config_from_dict(data, where="seasonality_changepoint_config") -> SeasonalityCpConfig:
    _check_keys(SeasonalityCpConfig, data, where)
    comps = [fourier_from_dict(c, f"{where}.components[{i}]") for i, c in enumerate(data.get("components", []))]
    return _build(SeasonalityCpConfig, data, where, components=comps)


@dataclass
class ModelSpec:
    """Model-form choices for the conditional mean.

    ``growth.changepoints == "auto"`` runs trend changepoint detection with
    ``trend_changepoint_config`` before featurization.
    ``seasonality_changepoints`` is ``"off"``, ``"auto"`` or a list of
    ``(component, instant)`` pairs. ``interactions`` are pairs of glob
    selectors over column names; the right-hand side may instead name a
    categorical (``dow``, ``hour``, ``month``, ``quarter``, ``weekend``).
    ``algorithm_params`` holds ``lambda2`` (ridge), ``lambda1`` or
    ``lambda_fraction`` (lasso) and ``tau`` (quantile).
    """

    intercept: bool = True
    growth: GrowthSpec | None = field(default_factory=GrowthSpec)
    trend_changepoint_config: TrendCpConfig = field(default_factory=TrendCpConfig)
    seasonality: list[FourierSpec] = field(default_factory=list)
    seasonality_changepoints: object = "off"
    seasonality_changepoint_config: SeasonalityCpConfig = field(default_factory=SeasonalityCpConfig)
    categoricals: list[str] = field(default_factory=list)
    events: list[EventBasisSpec] = field(default_factory=list)
    event_db: str | None = None
    lags: LagSpec = field(default_factory=LagSpec)
    regressors: list[str] = field(default_factory=list)
    lagged_regressors: list[tuple[str, LagSpec]] = field(default_factory=list)
    interactions: list[tuple[str, str]] = field(default_factory=list)
    algorithm: str = "ols"
    algorithm_params: dict = field(default_factory=dict)
    clip_at_zero: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}; got {self.algorithm!r}")
        bad = [c for c in self.categoricals if c not in CATEGORICAL_LEVELS]
        if bad:
            raise ConfigError(f"unknown categorical feature(s) {bad}; allowed: {sorted(CATEGORICAL_LEVELS)}")
        sc = self.seasonality_changepoints
        if isinstance(sc, str):
            if sc not in ("off", "auto"):
                raise ConfigError("seasonality_changepoints must be 'off', 'auto' or a list of pairs")
        else:
            self.seasonality_changepoints = [(str(c), pd.Timestamp(t)) for c, t in sc]
        self.interactions = [tuple(pair) for pair in self.interactions]
        if any(len(pair) != 2 for pair in self.interactions):
            raise ConfigError("each interaction is a pair of selectors")
        self.lagged_regressors = [(str(n), ls) for n, ls in self.lagged_regressors]
        if self.algorithm == "quantile":
            tau = self.algorithm_params.get("tau", 0.5)
            if not 0 < tau < 1:
                raise ConfigError("quantile tau must lie in (0, 1)")

    def min_lag(self) -> int:
        """Smallest lag across all lag specs (0 when the model has none)."""
        lags = [ls.min_lag for ls in [self.lags, *(ls for _, ls in self.lagged_regressors)] if ls]
        return min(lags, default=0)

    def uses_lags(self) -> bool:
        return bool(self.lags) or any(bool(ls) for _, ls in self.lagged_regressors)

    def to_dict(self) -> dict:
        growth = None
        if self.growth is not None:
            cps = self.growth.changepoints
            growth = {
                "exponent": self.growth.exponent,
                "changepoints": cps if cps == "auto" else [encode_instant(c) for c in cps],
            }
        sc = self.seasonality_changepoints
        return {
            "intercept": self.intercept,
            "growth": growth,
            "trend_changepoint_config": trend_config_to_dict(self.trend_changepoint_config),
            "seasonality": [fourier_to_dict(f) for f in self.seasonality],
            "seasonality_changepoints": sc if isinstance(sc, str) else [[c, encode_instant(t)] for c, t in sc],
            "seasonality_changepoint_config": seasonality_config_to_dict(self.seasonality_changepoint_config),
            "categoricals": list(self.categoricals),
            "events": [event_to_dict(e) for e in self.events],
            "event_db": self.event_db,
            "lags": lags_to_dict(self.lags),
            "regressors": list(self.regressors),
            "lagged_regressors": [[n, lags_to_dict(ls)] for n, ls in self.lagged_regressors],
            "interactions": [list(p) for p in self.interactions],
            "algorithm": self.algorithm,
            "algorithm_params": dict(self.algorithm_params),
            "clip_at_zero": self.clip_at_zero,
        }

    @classmethod
    def from_dict(cls, data: dict, where: str = "model") -> "ModelSpec":
        _check_keys(cls, data, where)
        conv = {}
        if "growth" in data:
            conv["growth"] = None if data["growth"] is None else _build(GrowthSpec, data["growth"], f"{where}.growth")
        if "trend_changepoint_config" in data:
            conv["trend_changepoint_config"] = trend_config_from_dict(
                data["trend_changepoint_config"], f"{where}.trend_changepoint_config"
            )
        if "seasonality" in data:
            conv["seasonality"] = [
                fourier_from_dict(f, f"{where}.seasonality[{i}]") for i, f in enumerate(data["seasonality"])
            ]
        if "seasonality_changepoint_config" in data:
            conv["seasonality_changepoint_config"] = seasonality_config_from_dict(
                data["seasonality_changepoint_config"], f"{where}.seasonality_changepoint_config"
            )
        if "events" in data:
            conv["events"] = [_build(EventBasisSpec, e, f"{where}.events[{i}]") for i, e in enumerate(data["events"])]
        if "lags" in data:
            conv["lags"] = lags_from_dict(data["lags"], f"{where}.lags")
        if "lagged_regressors" in data:
            conv["lagged_regressors"] = [
                (name, lags_from_dict(ls, f"{where}.lagged_regressors[{i}]"))
                for i, (name, ls) in enumerate(data["lagged_regressors"])
            ]
        return _build(cls, data, where, **conv)


__all__ = [
    "ALGORITHMS",
    "ConfigError",
    "ModelSpec",
    "encode_duration",
    "encode_instant",
]
