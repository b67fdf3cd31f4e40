"""Market series ingestion, synthetic generation, splitting, scaling, windowing.

The canonical channel layout everywhere downstream: channel 0 is the target
series, channels 1..n are the driving series in declared order. Augmentation
channels (filtered trends) are appended after these by the trend filter.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MissingColumnError(ValueError):
    """A required column is absent from the CSV header."""


class UnparseableNumberError(ValueError):
    """A cell could not be parsed as a number."""


class MissingCellError(ValueError):
    """A row is missing a value."""


class NonMonotonicTimestampError(ValueError):
    """Timestamps are not strictly increasing."""


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MultivariateSeries:
    """A target series plus n driving series on a shared time axis.

    timestamps: integer epoch-minutes, strictly increasing, length N
    target:     float vector, length N
    drivers:    float matrix (n, N); n may be 0
    names:      n+1 labels, target first
    """

    timestamps: np.ndarray
    target: np.ndarray
    drivers: np.ndarray
    names: tuple

    def __post_init__(self):
        object.__setattr__(self, "timestamps", _readonly(np.asarray(self.timestamps, dtype=np.int64)))
        object.__setattr__(self, "target", _readonly(np.asarray(self.target, dtype=np.float64)))
        drivers = np.asarray(self.drivers, dtype=np.float64)
        if drivers.ndim == 1:
            drivers = drivers.reshape(0, self.target.shape[0]) if drivers.size == 0 else drivers.reshape(1, -1)
        object.__setattr__(self, "drivers", _readonly(drivers))
        object.__setattr__(self, "names", tuple(self.names))
        n = self.target.shape[0]
        if n < 1:
            raise ValueError("series must contain at least one observation")
        if self.timestamps.shape != (n,) or self.drivers.shape[1:] != (n,):
            raise ValueError("timestamps, target and drivers must share length N")
        if len(self.names) != self.drivers.shape[0] + 1:
            raise ValueError("names must label the target and every driver")
        if np.any(np.diff(self.timestamps) <= 0):
            raise NonMonotonicTimestampError("timestamps must be strictly increasing")
        if not (np.all(np.isfinite(self.target)) and np.all(np.isfinite(self.drivers))):
            raise ValueError("series values must be finite")

    @property
    def length(self) -> int:
        return self.target.shape[0]

    @property
    def n_drivers(self) -> int:
        return self.drivers.shape[0]

    def channel_matrix(self) -> np.ndarray:
        """(n+1, N) matrix with the target in row 0."""
        return np.vstack([self.target[None, :], self.drivers])


@dataclass(frozen=True)
class Window:
    """One supervised sample: a (channels, T_i) input block and T_o targets."""

    inputs: np.ndarray
    targets: np.ndarray
    origin_index: int

    def __post_init__(self):
        object.__setattr__(self, "inputs", _readonly(np.asarray(self.inputs, dtype=np.float64)))
        object.__setattr__(self, "targets", _readonly(np.asarray(self.targets, dtype=np.float64)))
        if self.inputs.ndim != 2 or self.targets.ndim != 1:
            raise ValueError("window inputs must be (channels, T_i), targets (T_o,)")
        if self.inputs.shape[1] < 1 or self.targets.shape[0] < 1:
            raise ValueError("T_i and T_o must be >= 1")

    @property
    def n_channels(self) -> int:
        return self.inputs.shape[0]

    @property
    def t_in(self) -> int:
        return self.inputs.shape[1]

    @property
    def t_out(self) -> int:
        return self.targets.shape[0]


@dataclass(frozen=True)
class Scaler:
    """Per-channel affine normalization fit on the training region."""

    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _readonly(np.asarray(self.mean, dtype=np.float64)))
        object.__setattr__(self, "scale", _readonly(np.asarray(self.scale, dtype=np.float64)))
        if np.any(self.scale <= 0):
            raise ValueError("scale must be positive")


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a reproducible synthetic index-plus-drivers series."""

    length: int
    n_drivers: int = 2
    knot_count: int = 5
    noise_std: float = 1.0
    trend_slope_range: tuple = (-1.0, 1.0)
    driver_coupling: tuple = ()
    seed: int = 0
    base_level: float = 100.0

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError("length must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.knot_count < 0 or self.knot_count > self.length - 2:
            raise ValueError("knot_count must fit inside the series")
        coupling = tuple(float(c) for c in self.driver_coupling)
        if not coupling:
            coupling = tuple(0.0 for _ in range(self.n_drivers))
        if len(coupling) != self.n_drivers:
            raise ValueError("driver_coupling must have one weight per driver")
        object.__setattr__(self, "driver_coupling", coupling)
        object.__setattr__(self, "trend_slope_range", tuple(float(v) for v in self.trend_slope_range))


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def load_csv(path, timestamp_col: str = "timestamp", target_col: str | None = None,
             driver_cols: list | None = None) -> MultivariateSeries:
    """Read `timestamp,<target>,<driver>...` CSV into a MultivariateSeries.

    The header names the columns; by default the first non-timestamp column
    is the target and every remaining column is a driver. Timestamps are
    integer epoch-minutes and must already be sorted (they are checked, not
    re-sorted).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MissingCellError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if timestamp_col not in header:
        raise MissingColumnError(f"{path}: no '{timestamp_col}' column in header {header}")
    value_cols = [h for h in header if h != timestamp_col]
    if target_col is None:
        if not value_cols:
            raise MissingColumnError(f"{path}: header has no value columns")
        target_col = value_cols[0]
    if target_col not in header:
        raise MissingColumnError(f"{path}: no '{target_col}' column")
    if driver_cols is None:
        driver_cols = [c for c in value_cols if c != target_col]
    for c in driver_cols:
        if c not in header:
            raise MissingColumnError(f"{path}: no '{c}' column")

    col_index = {name: i for i, name in enumerate(header)}

    def cell(row_values, row_no, col):
        i = col_index[col]
        if i >= len(row_values) or row_values[i].strip() == "":
            raise MissingCellError(f"{path}: missing value at row {row_no}, column '{col}'")
        return row_values[i].strip()

    timestamps, target, drivers = [], [], [[] for _ in driver_cols]
    for row_no, row in enumerate(rows[1:], start=2):
        if not row or all(v.strip() == "" for v in row):
            continue  # ignore blank lines
        raw_ts = cell(row, row_no, timestamp_col)
        try:
            timestamps.append(int(raw_ts))
        except ValueError:
            raise UnparseableNumberError(
                f"{path}: bad timestamp {raw_ts!r} at row {row_no}") from None
        for col, dest in [(target_col, target)] + list(zip(driver_cols, drivers)):
            raw = cell(row, row_no, col)
            try:
                dest.append(float(raw))
            except ValueError:
                raise UnparseableNumberError(
                    f"{path}: bad number {raw!r} at row {row_no}, column '{col}'") from None

    ts = np.asarray(timestamps, dtype=np.int64)
    if ts.size > 1 and np.any(np.diff(ts) <= 0):
        bad = int(np.argmax(np.diff(ts) <= 0))
        raise NonMonotonicTimestampError(
            f"{path}: timestamps not strictly increasing around data row {bad + 1}")
    return MultivariateSeries(
        timestamps=ts,
        target=np.asarray(target),
        drivers=np.asarray(drivers, dtype=np.float64).reshape(len(driver_cols), -1),
        names=(target_col, *driver_cols),
    )


def write_csv(series: MultivariateSeries, path) -> Path:
    """Emit the standard `timestamp,<target>,<driver>...` CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", *series.names])
        channels = series.channel_matrix()
        for i in range(series.length):
            writer.writerow([int(series.timestamps[i]),
                             *(repr(float(v)) for v in channels[:, i])])
    return path


# ---------------------------------------------------------------------------
# split / scale / window
# ---------------------------------------------------------------------------

def train_test_split(series: MultivariateSeries, train_fraction: float):
    """Chronological split at floor(N * train_fraction); no shuffling."""
    if not (0.0 < train_fraction < 1.0):
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = int(np.floor(series.length * train_fraction))
    if n_train < 1 or series.length - n_train < 1:
        raise ValueError(f"split of N={series.length} at {train_fraction} leaves an empty part")

    def piece(sl):
        return MultivariateSeries(
            timestamps=series.timestamps[sl],
            target=series.target[sl],
            drivers=series.drivers[:, sl],
            names=series.names,
        )

    return piece(slice(0, n_train)), piece(slice(n_train, series.length))


def fit_scaler(train: MultivariateSeries) -> Scaler:
    """Per-channel z-score statistics from the training region only."""
    channels = train.channel_matrix()
    mean = channels.mean(axis=1)
    scale = channels.std(axis=1)
    scale = np.where(scale > 0.0, scale, 1.0)
    return Scaler(mean=mean, scale=scale)


def apply_scaler(series: MultivariateSeries, scaler: Scaler) -> MultivariateSeries:
    channels = series.channel_matrix()
    if scaler.mean.shape[0] != channels.shape[0]:
        raise ValueError("scaler was fit on a different channel count")
    scaled = (channels - scaler.mean[:, None]) / scaler.scale[:, None]
    return MultivariateSeries(timestamps=series.timestamps, target=scaled[0],
                              drivers=scaled[1:], names=series.names)


def invert_scaler(values, scaler: Scaler, channel: int = 0) -> np.ndarray:
    """Map scaled values of one channel back to original units."""
    return np.asarray(values, dtype=np.float64) * scaler.scale[channel] + scaler.mean[channel]


def scale_channel(values, scaler: Scaler, channel: int = 0) -> np.ndarray:
    return (np.asarray(values, dtype=np.float64) - scaler.mean[channel]) / scaler.scale[channel]


def make_windows(series: MultivariateSeries, t_in: int, t_out: int, stride: int = 1):
    """Slice the series into supervised windows.

    Targets are the t_out target-channel values immediately after each input
    block; drivers contribute input channels only.
    """
    if t_in < 1 or t_out < 1:
        raise ValueError("t_in and t_out must be >= 1")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if t_in + t_out > series.length:
        raise ValueError(f"t_in + t_out = {t_in + t_out} exceeds series length {series.length}")
    channels = series.channel_matrix()
    count = (series.length - t_in - t_out) // stride + 1
    windows = []
    for j in range(count):
        o = j * stride
        windows.append(Window(
            inputs=channels[:, o:o + t_in].copy(),
            targets=series.target[o + t_in:o + t_in + t_out].copy(),
            origin_index=o,
        ))
    return windows


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

def _piecewise_linear(rng, length, knot_count, slope_range, start):
    """Piecewise-linear path with `knot_count` slope changes.

    Each segment's slope is drawn from slope_range, biased at the knot
    toward recovering the starting level (then clipped back into the
    range), so paths oscillate in a stable band instead of random-walking
    away. Segments themselves are exactly linear.
    """
    lo, hi = slope_range
    if knot_count > 0:
        knots = np.sort(rng.choice(np.arange(1, length - 1), size=knot_count, replace=False))
    else:
        knots = np.array([], dtype=np.int64)
    bounds = np.concatenate([[0], knots, [length - 1]])
    seg_len = max((length - 1) / (knot_count + 1), 1.0)
    values = np.empty(length)
    values[0] = start
    level = start
    for s in range(knot_count + 1):
        a, b = bounds[s], bounds[s + 1]
        slope = rng.uniform(lo, hi)
        if s > 0:
            slope = np.clip(slope - 0.75 * (level - start) / seg_len, lo, hi)
        steps = b - a
        if steps > 0:
            values[a + 1:b + 1] = level + slope * np.arange(1, steps + 1)
            level = values[b]
    return values


def synth_generate_with_truth(spec: SynthSpec):
    """Generate a series and return component arrays alongside it."""
    rng = np.random.default_rng(spec.seed)
    trend = _piecewise_linear(rng, spec.length, spec.knot_count,
                              spec.trend_slope_range, spec.base_level)
    drivers = np.empty((spec.n_drivers, spec.length))
    for k in range(spec.n_drivers):
        base = spec.base_level * rng.uniform(0.5, 1.5)
        d_trend = _piecewise_linear(rng, spec.length, spec.knot_count,
                                    spec.trend_slope_range, base)
        d_noise = rng.normal(0.0, 0.5 * spec.noise_std, size=spec.length)
        drivers[k] = d_trend + d_noise
    coupling = np.zeros(spec.length)
    for k, w in enumerate(spec.driver_coupling):
        coupling += w * drivers[k]
    noise = rng.normal(0.0, spec.noise_std, size=spec.length) if spec.noise_std > 0 \
        else np.zeros(spec.length)
    target = trend + coupling + noise
    series = MultivariateSeries(
        timestamps=np.arange(spec.length, dtype=np.int64),
        target=target,
        drivers=drivers,
        names=("target", *(f"driver_{k + 1}" for k in range(spec.n_drivers))),
    )
    return series, {"trend": trend, "coupling": coupling, "noise": noise}


def synth_generate(spec: SynthSpec) -> MultivariateSeries:
    series, _ = synth_generate_with_truth(spec)
    return series
