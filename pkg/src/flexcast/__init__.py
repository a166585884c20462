"""Interpretable regression-based forecasting.

The conditional mean is a linear model over growth, seasonality, event,
changepoint and lag features; prediction intervals come from residual
quantiles grouped by categorical features.
"""

from flexcast.changepoint import (
    ChangepointSet,
    SeasonalityCpConfig,
    TrendCpConfig,
    detect_seasonality_changepoints,
    detect_trend_changepoints,
)
from flexcast.evaluation import CvConfig, make_splits, mape, rmse, run_cv
from flexcast.featurize import EventBasisSpec, FourierSpec, GrowthSpec, LagSpec
from flexcast.mean_model import FittedModel, ForecastResult, decompose, fit, predict
from flexcast.model_spec import ModelSpec
from flexcast.timebase import EventOccurrence, Frequency, TimeSeries, read_series_csv
from flexcast.volatility import VolatilityConfig, fit_volatility

__version__ = "0.1.0"

__all__ = [
    "ChangepointSet",
    "CvConfig",
    "EventBasisSpec",
    "EventOccurrence",
    "FittedModel",
    "ForecastResult",
    "FourierSpec",
    "Frequency",
    "GrowthSpec",
    "LagSpec",
    "ModelSpec",
    "SeasonalityCpConfig",
    "TimeSeries",
    "TrendCpConfig",
    "VolatilityConfig",
    "decompose",
    "detect_seasonality_changepoints",
    "detect_trend_changepoints",
    "fit",
    "fit_volatility",
    "make_splits",
    "mape",
    "predict",
    "read_series_csv",
    "rmse",
    "run_cv",
]
