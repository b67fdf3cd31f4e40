"""Experiment orchestration: the with/without-trend-feature model matrix.

A run loads or generates a series, splits it chronologically, z-scores on
training statistics, windows both regions, optionally appends filtered
trend channels, trains every configured family with and without the trend
feature from identical seeds, evaluates in original price units, runs the
one-unit backtest, and pairs the two variants' per-sample errors in a
significance test. Everything is deterministic given (config, seed).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import (MultivariateSeries, Scaler, SynthSpec, apply_scaler, fit_scaler,
                   invert_scaler, load_csv, make_windows, synth_generate,
                   train_test_split)
from .evaluation import (MetricReport, PairedTestResult, backtest, compute_metrics,
                         default_initial_balance, paired_t_test)
from .l1tf import AUGMENT_MODES, augment_with_trend, l1_trend_filter
from .models import (NEURAL_FAMILIES, TrainConfig, arima_fit, arima_forecast,
                     lookahead_predict, lookahead_prediction_pairs, train)

FAMILY_LABELS = {"fcn": "FCN", "darnn": "DARNN", "dsanet": "DSANet",
                 "arima": "ARIMA", "lookahead": "Lookahead"}
ALL_FAMILIES = tuple(FAMILY_LABELS)
OUTPUT_DIR_ENV = "TRENDCAST_OUT"
P_VALUE_FLAG_LEVEL = 0.05


class ConfigError(ValueError):
    """The experiment configuration is invalid."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synth"                       # "csv" | "synth"
    # csv fields
    path: str | None = None
    timestamp_col: str = "timestamp"
    target_col: str | None = None
    driver_cols: tuple | None = None
    # synth fields
    length: int = 2000
    n_drivers: int = 2
    knot_count: int = 5
    noise_std: float = 1.0
    trend_slope_range: tuple = (-1.0, 1.0)
    driver_coupling: tuple = ()
    seed: int = 0
    base_level: float = 100.0


@dataclass(frozen=True)
class WindowConfig:
    t_in: int = 64
    t_out: int = 5
    stride: int = 1


@dataclass(frozen=True)
class TrendFilterConfig:
    lam: float = 0.005
    mode: str = "target-only"                 # "off" | "target-only" | "all-channels"
    scope: str = "per-window"                 # "per-window" | "whole-series"
    tolerance: float = 1e-8
    max_iterations: int = 200


@dataclass(frozen=True)
class BacktestConfig:
    b_initial: float | None = None            # None -> 100 x first test price
    cost_per_trade: float = 0.0
    allow_short: bool = True


@dataclass(frozen=True)
class EvaluationConfig:
    pairing: str = "abs"                      # "abs" | "squared"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split_fraction: float = 0.9
    window: WindowConfig = field(default_factory=WindowConfig)
    trend_filter: TrendFilterConfig = field(default_factory=TrendFilterConfig)
    families: tuple = ("lookahead", "arima", "fcn", "dsanet", "darnn")
    model_hyper: dict = field(default_factory=dict)   # family -> hyper dict
    training: TrainConfig = field(default_factory=TrainConfig)
    backtest: BacktestConfig = field(default_factory=BacktestConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    output_dir: str | None = None


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.dataset.kind not in ("csv", "synth"):
        raise ConfigError(f"dataset.kind must be csv or synth, got {cfg.dataset.kind!r}")
    if cfg.dataset.kind == "csv" and not cfg.dataset.path:
        raise ConfigError("dataset.kind=csv requires dataset.path")
    if not 0.0 < cfg.split_fraction < 1.0:
        raise ConfigError("split_fraction must lie in (0, 1)")
    if cfg.window.t_in < 1 or cfg.window.t_out < 1 or cfg.window.stride < 1:
        raise ConfigError("window sizes and stride must be >= 1")
    if cfg.trend_filter.mode not in ("off", *AUGMENT_MODES):
        raise ConfigError(f"trend_filter.mode must be off, target-only or all-channels")
    if cfg.trend_filter.scope not in ("per-window", "whole-series"):
        raise ConfigError("trend_filter.scope must be per-window or whole-series")
    if cfg.trend_filter.lam < 0:
        raise ConfigError("trend_filter.lam must be >= 0")
    unknown = [f for f in cfg.families if f not in ALL_FAMILIES]
    if unknown:
        raise ConfigError(f"unknown families {unknown}; known: {list(ALL_FAMILIES)}")
    if cfg.evaluation.pairing not in ("abs", "squared"):
        raise ConfigError("evaluation.pairing must be abs or squared")
    unknown_hyper = [f for f in cfg.model_hyper if f not in ALL_FAMILIES]
    if unknown_hyper:
        raise ConfigError(f"model_hyper for unknown families {unknown_hyper}")
    return cfg


def _dataclass_from_dict(cls, d, context):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{context}: expected a mapping, got {type(d).__name__}")
    allowed = {f.name for f in cls.__dataclass_fields__.values()}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in d.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d or {})
    sections = {
        "dataset": DatasetConfig, "window": WindowConfig,
        "trend_filter": TrendFilterConfig, "training": TrainConfig,
        "backtest": BacktestConfig, "evaluation": EvaluationConfig,
    }
    kwargs = {}
    for name, cls in sections.items():
        kwargs[name] = _dataclass_from_dict(cls, d.pop(name, None), name)
    if "families" in d:
        kwargs["families"] = tuple(d.pop("families"))
    if "model_hyper" in d:
        hyper = d.pop("model_hyper")
        if not isinstance(hyper, dict):
            raise ConfigError("model_hyper must map family -> hyperparameters")
        kwargs["model_hyper"] = {k: dict(v) for k, v in hyper.items()}
    for key in ("split_fraction", "output_dir"):
        if key in d:
            kwargs[key] = d.pop(key)
    if d:
        raise ConfigError(f"unknown top-level config keys {sorted(d)}")
    return validate_config(ExperimentConfig(**kwargs))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    return d


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply dotted key=value overrides (values parsed as YAML scalars)."""
    import yaml

    d = config_to_dict(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = d
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"override {key!r}: no section {part!r}")
            node = node[part]
        node[parts[-1]] = value
    return config_from_dict(d)


def load_config(path) -> ExperimentConfig:
    import yaml

    with open(path, encoding="utf-8") as fh:
        return config_from_dict(yaml.safe_load(fh) or {})


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# report structures
# ---------------------------------------------------------------------------

@dataclass
class PredictionTrace:
    times: np.ndarray       # timestamps of the predicted (last) step
    actual: np.ndarray
    predicted: np.ndarray


@dataclass
class CellResult:
    family: str
    augmented: bool
    label: str
    metrics: MetricReport | None = None
    rate_of_return: float | None = None
    predictions: PredictionTrace | None = None
    error: str | None = None


@dataclass
class TrendOverlay:
    name: str
    times: np.ndarray
    raw: np.ndarray
    trend: np.ndarray


@dataclass
class PairedCell:
    family: str
    result: PairedTestResult


@dataclass
class ExperimentReport:
    metadata: dict
    cells: list
    paired_tests: list
    trend_overlays: list


def cell_label(family: str, augmented: bool) -> str:
    base = FAMILY_LABELS[family]
    return f"{base} + L1TF" if augmented else base


# ---------------------------------------------------------------------------
# dataset preparation
# ---------------------------------------------------------------------------

def load_dataset(cfg: DatasetConfig) -> MultivariateSeries:
    if cfg.kind == "csv":
        return load_csv(cfg.path, timestamp_col=cfg.timestamp_col,
                        target_col=cfg.target_col,
                        driver_cols=list(cfg.driver_cols) if cfg.driver_cols else None)
    return synth_generate(SynthSpec(
        length=cfg.length, n_drivers=cfg.n_drivers, knot_count=cfg.knot_count,
        noise_std=cfg.noise_std, trend_slope_range=cfg.trend_slope_range,
        driver_coupling=cfg.driver_coupling, seed=cfg.seed, base_level=cfg.base_level))


def _augment_series_whole(scaled: MultivariateSeries, tf: TrendFilterConfig) -> MultivariateSeries:
    """Filter entire scaled channels offline and append them as channels.

    Replicates a whole-series preprocessing setup; the filtered channels see
    the full series, including future values, so this is NOT causal. Kept
    behind the explicit scope flag for replication studies.
    """
    channels = scaled.channel_matrix()
    sources = [0] if tf.mode == "target-only" else list(range(channels.shape[0]))
    trends = [l1_trend_filter(channels[ch], tf.lam, tf.tolerance, tf.max_iterations).x
              for ch in sources]
    names = scaled.names + tuple(f"trend({scaled.names[ch]})" for ch in sources)
    return MultivariateSeries(
        timestamps=scaled.timestamps,
        target=scaled.target,
        drivers=np.vstack([scaled.drivers, *[t[None, :] for t in trends]]),
        names=names)


def prepare_datasets(cfg: ExperimentConfig):
    """Load, split, scale and window; returns baseline and augmented windows.

    Returned dict keys: scaler, train/test (scaled series pieces), baseline
    and augmented window lists, and the original (unscaled) test series.
    """
    series = load_dataset(cfg.dataset)
    train_raw, test_raw = train_test_split(series, cfg.split_fraction)
    w = cfg.window
    for region, name in ((train_raw, "train"), (test_raw, "test")):
        if w.t_in + w.t_out > region.length:
            raise ConfigError(
                f"t_in + t_out = {w.t_in + w.t_out} exceeds the {name} region "
                f"length {region.length}")
    scaler = fit_scaler(train_raw)
    train_scaled = apply_scaler(train_raw, scaler)
    test_scaled = apply_scaler(test_raw, scaler)
    base_train = make_windows(train_scaled, w.t_in, w.t_out, w.stride)
    base_test = make_windows(test_scaled, w.t_in, w.t_out, w.stride)

    tf = cfg.trend_filter
    aug_train = aug_test = None
    if tf.mode != "off":
        if tf.scope == "per-window":
            aug_train = augment_with_trend(base_train, tf.lam, tf.mode,
                                           tf.tolerance, tf.max_iterations)
            aug_test = augment_with_trend(base_test, tf.lam, tf.mode,
                                          tf.tolerance, tf.max_iterations)
        else:
            scaled_full = apply_scaler(series, scaler)
            aug_full = _augment_series_whole(scaled_full, tf)
            aug_train_series, aug_test_series = train_test_split(aug_full, cfg.split_fraction)
            aug_train = make_windows(aug_train_series, w.t_in, w.t_out, w.stride)
            aug_test = make_windows(aug_test_series, w.t_in, w.t_out, w.stride)

    return {
        "series": series, "scaler": scaler,
        "train_raw": train_raw, "test_raw": test_raw,
        "train_scaled": train_scaled, "test_scaled": test_scaled,
        "base_train": base_train, "base_test": base_test,
        "aug_train": aug_train, "aug_test": aug_test,
        "n_original_channels": series.n_drivers + 1,
    }


def compute_trend_overlays(series: MultivariateSeries, scaler: Scaler,
                           tf: TrendFilterConfig) -> list:
    """Whole-series raw-vs-trend overlays (in original units) for plotting."""
    if tf.mode == "off":
        return []
    channels = series.channel_matrix()
    sources = [0] if tf.mode == "target-only" else list(range(channels.shape[0]))
    overlays = []
    for ch in sources:
        scaled = (channels[ch] - scaler.mean[ch]) / scaler.scale[ch]
        sol = l1_trend_filter(scaled, tf.lam, tf.tolerance, tf.max_iterations)
        overlays.append(TrendOverlay(
            name=series.names[ch],
            times=series.timestamps.copy(),
            raw=channels[ch].copy(),
            trend=invert_scaler(sol.x, scaler, channel=ch)))
    return overlays


# ---------------------------------------------------------------------------
# cell evaluation
# ---------------------------------------------------------------------------

def _evaluate_window_predictions(test_windows, predict_fn, test_raw, scaler,
                                 w: WindowConfig, bt: BacktestConfig):
    """Predict every test window, score the last step in original units,
    and run the one-unit backtest at the window-end decision times."""
    last_preds_scaled = np.array([predict_fn(win)[-1] for win in test_windows])
    predicted = invert_scaler(last_preds_scaled, scaler, channel=0)
    target_idx = np.array([win.origin_index + w.t_in + w.t_out - 1 for win in test_windows])
    decision_idx = np.array([win.origin_index + w.t_in - 1 for win in test_windows])
    actual = test_raw.target[target_idx]
    times = test_raw.timestamps[target_idx]
    metrics = compute_metrics(actual, predicted)
    prices = test_raw.target[decision_idx]
    b_initial = bt.b_initial if bt.b_initial is not None \
        else default_initial_balance(test_raw.target[0])
    _, ror = backtest(prices, predicted, b_initial, cost_per_trade=bt.cost_per_trade,
                      allow_short=bt.allow_short, p_close=test_raw.target[-1])
    trace = PredictionTrace(times=times, actual=actual, predicted=predicted)
    return metrics, ror, trace


def _run_lookahead_cell(cfg: ExperimentConfig, prep) -> CellResult:
    test_raw = prep["test_raw"]
    horizon = cfg.window.t_out
    actual, predicted = lookahead_prediction_pairs(test_raw.target, horizon)
    metrics = compute_metrics(actual, predicted)
    positions = lookahead_predict(test_raw.target, horizon)
    bt = cfg.backtest
    b_initial = bt.b_initial if bt.b_initial is not None \
        else default_initial_balance(test_raw.target[0])
    _, ror = backtest(test_raw.target, test_raw.target + positions, b_initial,
                      cost_per_trade=bt.cost_per_trade, allow_short=bt.allow_short,
                      p_close=test_raw.target[-1])
    trace = PredictionTrace(times=test_raw.timestamps[horizon:].copy(),
                            actual=actual, predicted=predicted)
    return CellResult(family="lookahead", augmented=False,
                      label=cell_label("lookahead", False),
                      metrics=metrics, rate_of_return=ror, predictions=trace)


def _run_arima_cell(cfg: ExperimentConfig, prep) -> CellResult:
    hyper = dict(cfg.model_hyper.get("arima", {}))
    p = int(hyper.pop("p", 1))
    q = int(hyper.pop("q", 0))
    if hyper:
        raise ConfigError(f"unused arima hyperparameters: {sorted(hyper)}")
    model = arima_fit(prep["train_scaled"].target, p=p, q=q)
    w = cfg.window

    def predict_fn(window):
        return arima_forecast(model, window.inputs[0], w.t_out)

    metrics, ror, trace = _evaluate_window_predictions(
        prep["base_test"], predict_fn, prep["test_raw"], prep["scaler"], w, cfg.backtest)
    return CellResult(family="arima", augmented=False, label=cell_label("arima", False),
                      metrics=metrics, rate_of_return=ror, predictions=trace)


def _run_neural_cell(cfg: ExperimentConfig, prep, family: str, augmented: bool) -> CellResult:
    train_windows = prep["aug_train"] if augmented else prep["base_train"]
    test_windows = prep["aug_test"] if augmented else prep["base_test"]
    hyper = dict(cfg.model_hyper.get(family, {}))
    if family == "fcn":
        channels = [0]
        if augmented:
            # the filtered target channel is the first appended one
            channels.append(prep["n_original_channels"])
        hyper.setdefault("channels", tuple(channels))
    forecaster = train(family, train_windows, cfg.training, target_channel=0, hyper=hyper)
    metrics, ror, trace = _evaluate_window_predictions(
        test_windows, forecaster.predict, prep["test_raw"], prep["scaler"],
        cfg.window, cfg.backtest)
    return CellResult(family=family, augmented=augmented,
                      label=cell_label(family, augmented),
                      metrics=metrics, rate_of_return=ror, predictions=trace)


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Execute the full matrix and assemble the report.

    Dataset problems abort before any training; a failure inside one
    (family, augmentation) cell is recorded on that cell and does not stop
    the rest of the matrix.
    """
    config = validate_config(config)
    started = time.perf_counter()
    prep = prepare_datasets(config)
    augmentation_on = config.trend_filter.mode != "off"

    cells = []
    paired = []
    for family in config.families:
        if family == "lookahead":
            variants = [False]
        elif family == "arima":
            variants = [False]
        else:
            variants = [False, True] if augmentation_on else [False]
        family_cells = {}
        for augmented in variants:
            try:
                if family == "lookahead":
                    cell = _run_lookahead_cell(config, prep)
                elif family == "arima":
                    cell = _run_arima_cell(config, prep)
                else:
                    cell = _run_neural_cell(config, prep, family, augmented)
            except Exception as exc:  # cell isolation: record and continue
                cell = CellResult(family=family, augmented=augmented,
                                  label=cell_label(family, augmented),
                                  error=f"{type(exc).__name__}: {exc}")
            cells.append(cell)
            family_cells[augmented] = cell
        if family in NEURAL_FAMILIES and augmentation_on:
            with_cell = family_cells.get(True)
            without_cell = family_cells.get(False)
            if with_cell and without_cell and not with_cell.error and not without_cell.error:
                e_with = with_cell.metrics.per_sample_abs_errors
                e_without = without_cell.metrics.per_sample_abs_errors
                if config.evaluation.pairing == "squared":
                    e_with, e_without = e_with ** 2, e_without ** 2
                paired.append(PairedCell(family=family,
                                         result=paired_t_test(e_with, e_without)))

    overlays = compute_trend_overlays(prep["series"], prep["scaler"], config.trend_filter)
    metadata = {
        "seed": config.training.seed,
        "config_hash": config_hash(config),
        "config": config_to_dict(config),
        "wall_time_s": time.perf_counter() - started,
        "package_version": __version__,
    }
    return ExperimentReport(metadata=metadata, cells=cells, paired_tests=paired,
                            trend_overlays=overlays)


# ---------------------------------------------------------------------------
# serialization and rendering
# ---------------------------------------------------------------------------

def _float_or_none(x):
    return None if x is None else float(x)


def report_to_dict(report: ExperimentReport) -> dict:
    def trace_dict(trace):
        if trace is None:
            return None
        return {"times": trace.times.tolist(), "actual": trace.actual.tolist(),
                "predicted": trace.predicted.tolist()}

    def metrics_dict(m):
        if m is None:
            return None
        return {"rmse": m.rmse, "mae": m.mae, "mape": m.mape, "n_samples": m.n_samples,
                "per_sample_abs_errors": m.per_sample_abs_errors.tolist()}

    return {
        "metadata": dict(report.metadata),
        "cells": [{
            "family": c.family, "augmented": c.augmented, "label": c.label,
            "metrics": metrics_dict(c.metrics),
            "rate_of_return": _float_or_none(c.rate_of_return),
            "predictions": trace_dict(c.predictions),
            "error": c.error,
        } for c in report.cells],
        "paired_tests": [{
            "family": p.family,
            "t_statistic": p.result.t_statistic,
            "p_value": p.result.p_value,
            "n_pairs": p.result.n_pairs,
            "mean_difference": p.result.mean_difference,
            "degenerate": p.result.degenerate,
        } for p in report.paired_tests],
        "trend_overlays": [{
            "name": o.name, "times": o.times.tolist(),
            "raw": o.raw.tolist(), "trend": o.trend.tolist(),
        } for o in report.trend_overlays],
    }


def report_from_dict(d: dict) -> ExperimentReport:
    cells = []
    for c in d["cells"]:
        metrics = None
        if c["metrics"] is not None:
            metrics = MetricReport(
                rmse=c["metrics"]["rmse"], mae=c["metrics"]["mae"],
                mape=c["metrics"]["mape"], n_samples=c["metrics"]["n_samples"],
                per_sample_abs_errors=np.asarray(c["metrics"]["per_sample_abs_errors"]))
        trace = None
        if c["predictions"] is not None:
            trace = PredictionTrace(
                times=np.asarray(c["predictions"]["times"], dtype=np.int64),
                actual=np.asarray(c["predictions"]["actual"]),
                predicted=np.asarray(c["predictions"]["predicted"]))
        cells.append(CellResult(family=c["family"], augmented=c["augmented"],
                                label=c["label"], metrics=metrics,
                                rate_of_return=c["rate_of_return"],
                                predictions=trace, error=c["error"]))
    paired = [PairedCell(family=p["family"], result=PairedTestResult(
        t_statistic=p["t_statistic"], p_value=p["p_value"], n_pairs=p["n_pairs"],
        mean_difference=p["mean_difference"], degenerate=p["degenerate"]))
        for p in d["paired_tests"]]
    overlays = [TrendOverlay(name=o["name"],
                             times=np.asarray(o["times"], dtype=np.int64),
                             raw=np.asarray(o["raw"]), trend=np.asarray(o["trend"]))
                for o in d["trend_overlays"]]
    return ExperimentReport(metadata=dict(d["metadata"]), cells=cells,
                            paired_tests=paired, trend_overlays=overlays)


def render_tables(report: ExperimentReport) -> str:
    """Human-readable metric and significance tables."""
    lines = []
    lines.append(f"run {report.metadata.get('config_hash', '?')}  "
                 f"seed {report.metadata.get('seed', '?')}  "
                 f"v{report.metadata.get('package_version', '?')}")
    lines.append("")
    header = f"{'Model':<18}{'RMSE':>12}{'MAE':>12}{'MAPE(%)':>12}{'Return(%)':>12}"
    lines.append(header)
    lines.append("-" * len(header))
    for c in report.cells:
        if c.error:
            lines.append(f"{c.label:<18}  FAILED: {c.error}")
            continue
        lines.append(f"{c.label:<18}{c.metrics.rmse:>12.4f}{c.metrics.mae:>12.4f}"
                     f"{100.0 * c.metrics.mape:>12.4f}{c.rate_of_return:>12.2f}")
    if report.paired_tests:
        lines.append("")
        header2 = f"{'Model':<12}{'w/ L1TF':>12}{'w/o L1TF':>12}{'p-value':>12}  "
        lines.append(header2)
        lines.append("-" * len(header2))
        by_key = {(c.family, c.augmented): c for c in report.cells}
        for p in report.paired_tests:
            with_cell = by_key.get((p.family, True))
            without_cell = by_key.get((p.family, False))
            rmse_with = with_cell.metrics.rmse if with_cell and with_cell.metrics else math.nan
            rmse_without = without_cell.metrics.rmse if without_cell and without_cell.metrics else math.nan
            flag = " *" if p.result.p_value < P_VALUE_FLAG_LEVEL else ""
            lines.append(f"{FAMILY_LABELS[p.family]:<12}{rmse_with:>12.4f}"
                         f"{rmse_without:>12.4f}{p.result.p_value:>12.4f}{flag}")
        lines.append("")
        lines.append(f"* p < {P_VALUE_FLAG_LEVEL} (trend feature significantly better)")
    return "\n".join(lines) + "\n"


def emit_report(report: ExperimentReport, output_dir, formats=("json", "table")) -> list:
    """Write report.json and/or report.txt; returns the written paths."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        path = output_dir / "report.json"
        path.write_text(json.dumps(report_to_dict(report), sort_keys=True, indent=1))
        written.append(path)
    if "table" in formats:
        path = output_dir / "report.txt"
        path.write_text(render_tables(report))
        written.append(path)
    return written


def _slug(label: str) -> str:
    return label.lower().replace(" + ", "_").replace(" ", "_").replace("(", "").replace(")", "")


def emit_plot_data(report: ExperimentReport, output_dir) -> list:
    """Per-model `t,actual,predicted` CSVs and per-series `t,raw,trend` CSVs."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for c in report.cells:
        if c.error or c.predictions is None:
            continue
        path = output_dir / f"predictions_{_slug(c.label)}.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t,actual,predicted\n")
            for t, a, p in zip(c.predictions.times, c.predictions.actual,
                               c.predictions.predicted):
                fh.write(f"{int(t)},{a!r},{p!r}\n")
        written.append(path)
    for o in report.trend_overlays:
        path = output_dir / f"trend_{_slug(o.name)}.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t,raw,trend\n")
            for t, r, x in zip(o.times, o.raw, o.trend):
                fh.write(f"{int(t)},{r!r},{x!r}\n")
        written.append(path)
    return written


def resolve_output_dir(cli_value=None, config_value=None) -> Path:
    """CLI flag > config key > $TRENDCAST_OUT > ./trendcast_out."""
    for candidate in (cli_value, config_value, os.environ.get(OUTPUT_DIR_ENV)):
        if candidate:
            return Path(candidate)
    return Path("trendcast_out")
