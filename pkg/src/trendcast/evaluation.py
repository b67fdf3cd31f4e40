"""Error metrics, the one-unit investment backtest, and the paired t-test.

Metrics are computed in original price units (inverse-scaled predictions).
The backtest buys or sells exactly one unit per step by comparing the
last predicted value against the current price, and reports

    rate of return (%) = (B_last - B_initial + stocks * P_close) / B_initial * 100.

The paired test compares per-sample absolute errors of a model with and
without the trend feature; one-sided p = P(T_{n-1} <= t), so small p means
the trend-filtered variant's errors are significantly smaller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class LengthMismatchError(ValueError):
    """Paired vectors have different lengths."""


class ZeroTruthValueError(ValueError):
    """MAPE is undefined when a true value is zero."""


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricReport:
    rmse: float
    mae: float
    mape: float                      # fraction; report tables show x100
    n_samples: int
    per_sample_abs_errors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "per_sample_abs_errors",
                           np.asarray(self.per_sample_abs_errors, dtype=np.float64))


def _check_pair(y_true, y_pred, min_len=1):
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.ndim != 1 or y_pred.ndim != 1:
        raise LengthMismatchError("metrics expect 1-D vectors")
    if y_true.shape != y_pred.shape:
        raise LengthMismatchError(f"lengths differ: {y_true.shape} vs {y_pred.shape}")
    if y_true.size < min_len:
        raise LengthMismatchError(f"need at least {min_len} samples")
    return y_true, y_pred


def rmse(y_true, y_pred) -> float:
    y_true, y_pred = _check_pair(y_true, y_pred)
    return float(np.sqrt(np.mean((y_true - y_pred) ** 2)))


def mae(y_true, y_pred) -> float:
    y_true, y_pred = _check_pair(y_true, y_pred)
    return float(np.mean(np.abs(y_true - y_pred)))


def mape(y_true, y_pred) -> float:
    y_true, y_pred = _check_pair(y_true, y_pred)
    if np.any(y_true == 0.0):
        raise ZeroTruthValueError("mape undefined: a true value is zero")
    return float(np.mean(np.abs((y_true - y_pred) / y_true)))


def compute_metrics(y_true, y_pred) -> MetricReport:
    y_true, y_pred = _check_pair(y_true, y_pred)
    return MetricReport(
        rmse=rmse(y_true, y_pred),
        mae=mae(y_true, y_pred),
        mape=mape(y_true, y_pred),
        n_samples=int(y_true.size),
        per_sample_abs_errors=np.abs(y_true - y_pred),
    )


# ---------------------------------------------------------------------------
# one-unit investment backtest
# ---------------------------------------------------------------------------

@dataclass
class BacktestState:
    balance: float
    stocks_held: int
    trades: list = field(default_factory=list)   # (step, side, price)
    b_initial: float = 0.0


def default_initial_balance(first_price: float) -> float:
    """Balance proportional to the entry price: 100 units' worth."""
    return 100.0 * float(first_price)


def backtest(prices, predictions, b_initial: float, cost_per_trade: float = 0.0,
             allow_short: bool = True, p_close: float | None = None):
    """Trade one unit per step on the predicted direction.

    At step t: buy one unit at prices[t] when predictions[t] > prices[t],
    sell one when predictions[t] < prices[t], hold on ties. predictions[t]
    is the model's value for the step t + horizon. Returns the final state
    and the rate of return in percent, marking open positions to P_close
    (the final price unless given explicitly).
    """
    prices = np.asarray(prices, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if prices.size == 0:
        raise ValueError("backtest needs a nonempty price series")
    if prices.shape != predictions.shape:
        raise LengthMismatchError(
            f"misaligned predictions: {predictions.shape} vs prices {prices.shape}")
    if b_initial <= 0:
        raise ValueError("b_initial must be positive")

    state = BacktestState(balance=float(b_initial), stocks_held=0, b_initial=float(b_initial))
    for t, (price, pred) in enumerate(zip(prices, predictions)):
        if pred > price:
            state.balance -= price + cost_per_trade
            state.stocks_held += 1
            state.trades.append((t, "buy", float(price)))
        elif pred < price and (allow_short or state.stocks_held > 0):
            state.balance += price - cost_per_trade
            state.stocks_held -= 1
            state.trades.append((t, "sell", float(price)))
    close = float(prices[-1]) if p_close is None else float(p_close)
    ror = (state.balance - state.b_initial + state.stocks_held * close) / state.b_initial * 100.0
    return state, float(ror)


# ---------------------------------------------------------------------------
# Student-t CDF via the regularized incomplete beta function
# ---------------------------------------------------------------------------

_BETA_MAX_ITER = 300
_BETA_EPS = 3e-16
_BETA_TINY = 1e-300


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _BETA_TINY:
        d = _BETA_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _BETA_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETA_TINY:
            d = _BETA_TINY
        c = 1.0 + aa / c
        if abs(c) < _BETA_TINY:
            c = _BETA_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETA_TINY:
            d = _BETA_TINY
        c = 1.0 + aa / c
        if abs(c) < _BETA_TINY:
            c = _BETA_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_EPS:
            return h
    return h  # converged to working precision for all practical (a, b)


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) to better than 1e-10 absolute for a, b > 0."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_cdf(t: float, df: float) -> float:
    """P(T <= t) for Student's t with df degrees of freedom."""
    if df <= 0:
        raise ValueError("df must be positive")
    if t == 0.0:
        return 0.5
    x = df / (df + t * t)
    tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x)
    return 1.0 - tail if t > 0 else tail


# ---------------------------------------------------------------------------
# paired t-test
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairedTestResult:
    t_statistic: float
    p_value: float
    n_pairs: int
    mean_difference: float
    degenerate: bool = False


def paired_t_test(errors_a, errors_b) -> PairedTestResult:
    """One-sided paired test of H0: mean(a - b) >= 0 against a < b.

    ``errors_a`` are the with-trend-feature absolute errors, ``errors_b``
    the without ones, aligned by test sample. p = P(T_{n-1} <= t): small p
    means a is significantly smaller. Zero-variance differences are
    reported with the degenerate flag (p of 0, 1 or 0.5 by the sign of the
    mean).
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatchError(f"paired vectors must match: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise LengthMismatchError("paired t-test needs at least 2 pairs")
    d = a - b
    mean_d = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean_d == 0.0:
            return PairedTestResult(0.0, 0.5, n, 0.0, degenerate=True)
        t = math.inf if mean_d > 0 else -math.inf
        return PairedTestResult(t, 1.0 if mean_d > 0 else 0.0, n, mean_d, degenerate=True)
    t = mean_d / (sd / math.sqrt(n))
    return PairedTestResult(t, student_t_cdf(t, n - 1), n, mean_d)
