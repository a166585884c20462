"""Error metrics and rolling-window cross-validation.

Test windows are laid out backwards from the end of the series so the most
recent data is always tested. Each training range ends right before its test
window, and its last ``horizon`` points serve as the validation fold used to
pick a spec from the grid.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd

from flexcast import mean_model
from flexcast.model_spec import ModelSpec
from flexcast.solvers import SolverError
from flexcast.timebase import TimeSeries

logger = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "split",
    "spec_id",
    "train_start",
    "train_end",
    "test_start",
    "test_end",
    "val_mape",
    "test_mape",
    "test_rmse",
    "runtime_seconds",
)


class EvaluationError(ValueError):
    pass


def _pair(actual, predicted):
    a = np.asarray(actual, dtype=float)
    p = np.asarray(predicted, dtype=float)
    if a.shape != p.shape:
        raise EvaluationError(f"length mismatch: {a.shape} vs {p.shape}")
    if a.size == 0:
        raise EvaluationError("metrics need at least one point")
    return a, p


def mape(actual, predicted, epsilon: float | None = None) -> float:
    """Mean absolute percentage error, in percent.

    Zero actuals raise unless ``epsilon`` is given, in which case every
    denominator becomes ``max(|actual|, epsilon)``.
    """
    a, p = _pair(actual, predicted)
    if epsilon is None:
        zeros = np.flatnonzero(a == 0)
        if zeros.size:
            raise EvaluationError(
                f"MAPE undefined: zero actual value(s) at indices {zeros.tolist()[:20]}; "
                "pass an epsilon to bound the denominators"
            )
        denom = np.abs(a)
    else:
        denom = np.maximum(np.abs(a), epsilon)
    return float(100.0 * np.mean(np.abs(a - p) / denom))


def rmse(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    return float(np.sqrt(np.mean((a - p) ** 2)))


@dataclass
class CvConfig:
    horizon: int = 7
    min_train_periods: int = 730
    periods_between_splits: int = 25
    num_splits: int = 16
    expanding_window: bool = True

    def __post_init__(self):
        for name in ("horizon", "min_train_periods", "periods_between_splits", "num_splits"):
            if int(getattr(self, name)) < 1:
                raise EvaluationError(f"{name} must be positive")
            setattr(self, name, int(getattr(self, name)))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class Split:
    """Half-open index ranges of one fold."""

    train: range
    validation: range
    test: range

    @property
    def fit_range(self) -> range:
        """Training range without the validation fold."""
        return range(self.train.start, self.validation.start)


def make_splits(series_length: int, config: CvConfig) -> list[Split]:
    """Rolling-origin folds, in chronological order.

    The ``k``-th test window (k = 0 is the latest) ends at
    ``series_length - k * periods_between_splits``. Folds are kept while the
    training range has at least ``min_train_periods`` points. With
    ``expanding_window`` every training range starts at 0; otherwise it has
    exactly ``min_train_periods`` points.
    """
    h = config.horizon
    if config.min_train_periods <= h:
        raise EvaluationError("min_train_periods must exceed the horizon to leave room for a validation fold")
    out = []
    for k in range(config.num_splits):
        test_end = series_length - k * config.periods_between_splits
        test_start = test_end - h
        if test_start < config.min_train_periods:
            break
        train_start = 0 if config.expanding_window else test_start - config.min_train_periods
        out.append(Split(range(train_start, test_start), range(test_start - h, test_start), range(test_start, test_end)))
    if not out:
        raise EvaluationError(
            f"no feasible split: {series_length} points cannot hold {config.min_train_periods} training "
            f"points plus a {h}-point test window"
        )
    return out[::-1]


@dataclass
class SplitResult:
    split: int
    spec_id: str
    train: tuple[pd.Timestamp, pd.Timestamp]
    validation: tuple[pd.Timestamp, pd.Timestamp]
    test: tuple[pd.Timestamp, pd.Timestamp]
    val_mape: float
    test_mape: float
    test_rmse: float
    runtime_seconds: float
    val_scores: dict[str, float] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)


@dataclass
class CvReport:
    splits: list[SplitResult]
    runtime_seconds: float

    def _metric(self, name) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.splits])

    @property
    def mean_test_mape(self) -> float:
        return float(np.mean(self._metric("test_mape")))

    @property
    def sd_test_mape(self) -> float:
        return float(np.std(self._metric("test_mape"), ddof=1)) if len(self.splits) > 1 else 0.0

    @property
    def mean_test_rmse(self) -> float:
        return float(np.mean(self._metric("test_rmse")))

    @property
    def sd_test_rmse(self) -> float:
        return float(np.std(self._metric("test_rmse"), ddof=1)) if len(self.splits) > 1 else 0.0

    def rows(self) -> list[dict]:
        """Per-split rows plus a trailing ``aggregate`` row of means."""
        out = [
            {
                "split": s.split,
                "spec_id": s.spec_id,
                "train_start": s.train[0],
                "train_end": s.train[1],
                "test_start": s.test[0],
                "test_end": s.test[1],
                "val_mape": s.val_mape,
                "test_mape": s.test_mape,
                "test_rmse": s.test_rmse,
                "runtime_seconds": s.runtime_seconds,
            }
            for s in self.splits
        ]
        out.append(
            {
                "split": "aggregate",
                "spec_id": "",
                "train_start": None,
                "train_end": None,
                "test_start": None,
                "test_end": None,
                "val_mape": float(np.mean(self._metric("val_mape"))),
                "test_mape": self.mean_test_mape,
                "test_rmse": self.mean_test_rmse,
                "runtime_seconds": self.runtime_seconds,
            }
        )
        return out


def _slice_regs(regressors: Mapping[str, np.ndarray], rng: range) -> dict[str, np.ndarray]:
    return {k: np.asarray(v)[rng.start : rng.stop] for k, v in regressors.items()}


def spec_label(index: int) -> str:
    return f"spec{index}"


FitFn = Callable[..., "mean_model.FittedModel"]
FIT_ERRORS = (ValueError, SolverError, ArithmeticError, np.linalg.LinAlgError)


def _score(series, regressors, spec, fit_rng, eval_rng, fit_fn, predict_fn, events, epsilon):
    train = series.slice(fit_rng.start, fit_rng.stop)
    model = fit_fn(train, _slice_regs(regressors, fit_rng), spec, events=events)
    fc = predict_fn(model, len(eval_rng), _slice_regs(regressors, eval_rng))
    actual = series.values[eval_rng.start : eval_rng.stop]
    return mape(actual, fc.yhat, epsilon), rmse(actual, fc.yhat)


def run_cv(
    series: TimeSeries,
    regressors: Mapping[str, np.ndarray] | None,
    spec_grid: Sequence[ModelSpec],
    config: CvConfig,
    *,
    events=None,
    mape_epsilon: float | None = None,
    fit_fn: FitFn | None = None,
    predict_fn=None,
) -> CvReport:
    """Grid selection on validation folds, scored on test windows.

    Per split every spec is fit on the training range minus its validation
    fold and scored by validation MAPE; the best (first on ties) is refit on
    the whole training range and scored on the test window. Specs that fail
    on a split are recorded and skipped. ``fit_fn``/``predict_fn`` default to
    :func:`flexcast.mean_model.fit` and :func:`flexcast.mean_model.predict`.
    """
    if not spec_grid:
        raise EvaluationError("the model grid is empty")
    fit_fn = fit_fn or mean_model.fit
    predict_fn = predict_fn or mean_model.predict
    regressors = dict(regressors or {})
    ts = series.timestamps
    t_all = time.perf_counter()
    results = []
    for i, split in enumerate(make_splits(len(series), config)):
        t0 = time.perf_counter()
        scores: dict[int, float] = {}
        failures: dict[str, str] = {}
        for j, spec in enumerate(spec_grid):
            try:
                scores[j] = _score(
                    series, regressors, spec, split.fit_range, split.validation, fit_fn, predict_fn, events, mape_epsilon
                )[0]
            except FIT_ERRORS as exc:
                failures[spec_label(j)] = f"{type(exc).__name__}: {exc}"
                logger.warning("split %d: %s failed on validation: %s", i, spec_label(j), exc)
        if not scores:
            raise EvaluationError(f"every spec failed on split {i}: {failures}")
        best = min(scores, key=lambda j: (scores[j], j))
        test_mape, test_rmse = _score(
            series, regressors, spec_grid[best], split.train, split.test, fit_fn, predict_fn, events, mape_epsilon
        )
        results.append(
            SplitResult(
                split=i,
                spec_id=spec_label(best),
                train=(ts[split.train.start], ts[split.train.stop - 1]),
                validation=(ts[split.validation.start], ts[split.validation.stop - 1]),
                test=(ts[split.test.start], ts[split.test.stop - 1]),
                val_mape=scores[best],
                test_mape=test_mape,
                test_rmse=test_rmse,
                runtime_seconds=time.perf_counter() - t0,
                val_scores={spec_label(j): v for j, v in scores.items()},
                failures=failures,
            )
        )
    return CvReport(results, time.perf_counter() - t_all)


__all__ = [
    "CvConfig",
    "CvReport",
    "EvaluationError",
    "REPORT_COLUMNS",
    "Split",
    "SplitResult",
    "make_splits",
    "mape",
    "rmse",
    "run_cv",
]
