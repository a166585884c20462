"""Command-line interface.

Commands read a JSON run configuration, run the pipeline and write CSV files
with 10 significant digits. Nothing is written unless the whole command
succeeds. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from flexcast import mean_model
from flexcast.changepoint import ChangepointError, detect_seasonality_changepoints, detect_trend_changepoints
from flexcast.evaluation import REPORT_COLUMNS, CvConfig, EvaluationError, run_cv
from flexcast.featurize import FeatureError
from flexcast.model_spec import ConfigError, ModelSpec
from flexcast.solvers import SolverError
from flexcast.timebase import TimeSeriesError, load_event_db, read_series_csv
from flexcast.volatility import VolatilityConfig, VolatilityError

logger = logging.getLogger("flexcast")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class DataError(ValueError):
    """Problem with input data files."""


@dataclass
class RunConfig:
    """Everything a command needs, parsed from the JSON config document.

    Relative paths are resolved against the directory of the config file.
    ``grid`` defaults to ``[model]`` for benchmarking.
    """

    input: str
    ts_column: str = "ts"
    value_column: str = "y"
    frequency: str | None = None
    events: str | None = None
    future_regressors: str | None = None
    model: ModelSpec = field(default_factory=ModelSpec)
    grid: list[ModelSpec] = field(default_factory=list)
    volatility: VolatilityConfig | None = None
    cv: CvConfig = field(default_factory=CvConfig)
    horizon: int | None = None
    output: str = "."
    seed: int = 0
    mape_epsilon: float | None = None

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("the config document must be an object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"config: unknown field(s) {unknown}; allowed: {sorted(known)}")
        if "input" not in data:
            raise ConfigError("config: 'input' (path of the series CSV) is required")
        kw = dict(data)
        base = Path(base_dir)
        for key in ("input", "events", "future_regressors"):
            if kw.get(key) is not None:
                kw[key] = str(base / kw[key])
        if kw.get("output") is not None:
            kw["output"] = str(base / kw["output"])
        kw["model"] = ModelSpec.from_dict(data.get("model", {}), "model")
        kw["grid"] = [ModelSpec.from_dict(g, f"grid[{i}]") for i, g in enumerate(data.get("grid", []))]
        try:
            if data.get("volatility") is not None:
                kw["volatility"] = VolatilityConfig(**data["volatility"])
            kw["cv"] = CvConfig(**data.get("cv", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config: {exc}") from exc
        return cls(**kw)


# formatting --------------------------------------------------------------


def fmt_number(v) -> str:
    if v is None:
        return ""
    v = float(v)
    if math.isnan(v):
        return ""
    return "%.10g" % v


def fmt_timestamps(ts) -> list[str]:
    idx = pd.DatetimeIndex(ts)
    if len(idx) and bool(np.all(idx == idx.normalize())):
        return [t.strftime("%Y-%m-%d") for t in idx]
    return [t.strftime("%Y-%m-%d %H:%M:%S") for t in idx]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, pd.Timestamp):
        return fmt_timestamps([v])[0]
    if isinstance(v, (float, np.floating)):
        return fmt_number(v)
    return str(v)


def render_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def frame_csv(frame: pd.DataFrame) -> str:
    """CSV of a frame whose index is the timestamps."""
    stamps = fmt_timestamps(frame.index)
    cols = list(frame.columns)
    rows = [[s, *(fmt_number(v) for v in vals)] for s, vals in zip(stamps, frame.to_numpy(dtype=float))]
    return render_csv(["ts", *cols], rows)


def write_outputs(outdir, files: dict[str, str]) -> list[Path]:
    """Write all rendered files; each goes through a temporary name first."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, text in files.items():
        path = out / name
        tmp = out / f".{name}.tmp"
        with open(tmp, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
        paths.append(path)
    return paths


# commands ----------------------------------------------------------------


def _load(config: RunConfig):
    frame = read_series_csv(config.input, config.ts_column, config.value_column, config.frequency)
    events = load_event_db(config.events) if config.events else None
    return frame, events


def _future_regressors(config: RunConfig, spec: ModelSpec, timestamps) -> dict[str, np.ndarray]:
    if not spec.regressors:
        return {}
    if not config.future_regressors:
        raise mean_model.MissingRegressorError(spec.regressors)
    fut = read_series_csv(config.future_regressors, config.ts_column, config.value_column, config.frequency)
    pos = fut.series.timestamps.get_indexer(timestamps)
    if np.any(pos < 0):
        raise DataError(f"{config.future_regressors}: does not cover every forecast timestamp")
    missing = [n for n in spec.regressors if n not in fut.regressors]
    if missing:
        raise mean_model.MissingRegressorError(missing)
    return {n: fut.regressors[n][pos] for n in spec.regressors}


def cmd_forecast(config: RunConfig, horizon: int | None = None) -> dict[str, Path]:
    """Fit, forecast and write ``forecast.csv``, ``components.csv`` and ``model.json``."""
    horizon = horizon if horizon is not None else config.horizon
    if horizon is None:
        raise ConfigError("a forecast horizon is required (--horizon or 'horizon' in the config)")
    mean_model.check_horizon(config.model, horizon)
    frame, events = _load(config)
    model = mean_model.fit(frame.series, frame.regressors, config.model, events=events, volatility=config.volatility)
    model.fit_info["seed"] = config.seed
    future_ts = frame.series.future_timestamps(horizon)
    result = mean_model.predict(model, horizon, _future_regressors(config, config.model, future_ts))

    header = ["ts", "yhat"]
    cols = [fmt_timestamps(result.timestamps), [fmt_number(v) for v in result.yhat]]
    if result.lower is not None:
        header += ["yhat_lower", "yhat_upper"]
        cols += [[fmt_number(v) for v in result.lower], [fmt_number(v) for v in result.upper]]
    files = {
        "forecast.csv": render_csv(header, list(zip(*cols))),
        "components.csv": frame_csv(result.components),
        "model.json": json.dumps(model.to_dict(), indent=1, sort_keys=True, allow_nan=False) + "\n",
    }
    paths = write_outputs(config.output, files)
    return {p.name: p for p in paths}


def cmd_detect_changepoints(config: RunConfig) -> dict[str, Path]:
    """Write ``changepoints.csv`` with trend and seasonality changepoints."""
    frame, _ = _load(config)
    spec = config.model
    trend = detect_trend_changepoints(frame.series, spec.trend_changepoint_config)
    rows = [[t, "trend", "", m] for t, m in zip(trend.instants, trend.magnitudes)]
    scfg = spec.seasonality_changepoint_config
    if spec.seasonality_changepoints == "auto" or scfg.components:
        if not scfg.components:
            scfg = dataclasses.replace(scfg, components=list(spec.seasonality))
        found = detect_seasonality_changepoints(frame.series, scfg, trend)
        rows += [[s.instant, "seasonality", s.component, s.magnitude] for s in found]
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    stamps = fmt_timestamps([r[0] for r in rows]) if rows else []
    body = [[s, *r[1:]] for s, r in zip(stamps, rows)]
    text = render_csv(["instant", "kind", "component", "magnitude"], body)
    paths = write_outputs(config.output, {"changepoints.csv": text})
    return {p.name: p for p in paths}


def cmd_decompose(config: RunConfig) -> dict[str, Path]:
    """Fit and write the in-sample component table ``components.csv``."""
    frame, events = _load(config)
    model = mean_model.fit(frame.series, frame.regressors, config.model, events=events)
    table = mean_model.decompose(model, frame.series.timestamps)
    table["yhat"] = table.sum(axis=1, skipna=False)
    paths = write_outputs(config.output, {"components.csv": frame_csv(table)})
    return {p.name: p for p in paths}


def cmd_benchmark(config: RunConfig) -> dict[str, Path]:
    """Rolling-window CV over the grid of model specs; writes ``report.csv``."""
    frame, events = _load(config)
    grid = config.grid or [config.model]
    report = run_cv(
        frame.series, frame.regressors, grid, config.cv, events=events, mape_epsilon=config.mape_epsilon
    )
    rows = [[r[c] for c in REPORT_COLUMNS] for r in report.rows()]
    paths = write_outputs(config.output, {"report.csv": render_csv(REPORT_COLUMNS, rows)})
    return {p.name: p for p in paths}


# entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flexcast", description="Interpretable regression-based forecasting.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run configuration")
    common.add_argument("--output", help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, help="random seed recorded with the outputs")
    common.add_argument("--input", help="series CSV (overrides the config)")
    sub = parser.add_subparsers(dest="command", required=True)

    fc = sub.add_parser("forecast", parents=[common], help="fit and forecast")
    fc.add_argument("--horizon", type=int)
    fc.add_argument("--coverage", type=float, help="interval coverage (default 0.95)")
    fc.add_argument("--volatility-features", help="comma-separated interval features, e.g. dow,is_event")
    sub.add_parser("detect-changepoints", parents=[common], help="trend and seasonality changepoints")
    sub.add_parser("decompose", parents=[common], help="in-sample component table")
    bm = sub.add_parser("benchmark", parents=[common], help="rolling-window cross-validation")
    bm.add_argument("--mape-epsilon", type=float, help="lower bound on MAPE denominators")
    return parser


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: invalid JSON: {exc.msg}") from exc
    return RunConfig.from_dict(data, Path(path).parent)


def _apply_flags(config: RunConfig, args) -> RunConfig:
    if args.output is not None:
        config.output = args.output
    if args.seed is not None:
        config.seed = args.seed
    if args.input is not None:
        config.input = args.input
    if getattr(args, "mape_epsilon", None) is not None:
        config.mape_epsilon = args.mape_epsilon
    features = getattr(args, "volatility_features", None)
    coverage = getattr(args, "coverage", None)
    if features is not None or coverage is not None:
        vol = config.volatility or VolatilityConfig()
        try:
            if features is not None:
                vol = dataclasses.replace(vol, features=[f.strip() for f in features.split(",") if f.strip()])
            if coverage is not None:
                vol = dataclasses.replace(vol, coverage=coverage)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        config.volatility = vol
    return config


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, VolatilityError, FeatureError, mean_model.SimulationFreeError)):
        return EXIT_CONFIG
    if isinstance(exc, (SolverError, np.linalg.LinAlgError, ArithmeticError)):
        return EXIT_NUMERIC
    if isinstance(exc, (TimeSeriesError, DataError, ChangepointError, EvaluationError, mean_model.ModelError, OSError, ValueError)):
        return EXIT_DATA
    raise exc


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = _apply_flags(load_config(args.config), args)
        np.random.seed(config.seed)
        if args.command == "forecast":
            cmd_forecast(config, args.horizon)
        elif args.command == "detect-changepoints":
            cmd_detect_changepoints(config)
        elif args.command == "decompose":
            cmd_decompose(config)
        else:
            cmd_benchmark(config)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = exit_code_for(exc)
        kind = {EXIT_CONFIG: "config error", EXIT_DATA: "data error", EXIT_NUMERIC: "numeric failure"}[code]
        print(f"flexcast: {kind}: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
