"""L1 trend filtering: piecewise-linear trend estimation for noisy series.

Solves  minimize_x  (1/2)||y - x||_2^2 + lam * ||D x||_1  where D is the
(n-2) x n second-difference operator with stencil (1, -2, 1). The solver
works on the box-constrained dual

    minimize_z  (1/2) z' D D' z - (D y)' z   s.t.  ||z||_inf <= lam,

recovering x = y - D' z, using a primal-dual interior-point iteration whose
Newton systems are pentadiagonal and solved with a banded Cholesky
factorization, so one solve costs O(n).

Also provides the window augmentation that appends filtered-trend channels
to supervised windows, computed causally from each window's inputs alone.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solveh_banded

from .data import Window


class LengthMismatchError(ValueError):
    """Vector length does not match the operator size."""


class TrendFilterWarning(UserWarning):
    """A window's trend filter stopped before reaching tolerance."""


AUGMENT_MODES = ("target-only", "all-channels")


class SecondDifferenceOperator:
    """Banded representation of D in R^{(n-2) x n} with rows (1, -2, 1)."""

    def __init__(self, n_obs: int):
        if n_obs < 3:
            raise ValueError(f"second differences need n_obs >= 3, got {n_obs}")
        self.n_obs = int(n_obs)
        self.n_rows = self.n_obs - 2

    def apply(self, v: np.ndarray) -> np.ndarray:
        """(Dv)_i = v_i - 2 v_{i+1} + v_{i+2}."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n_obs,):
            raise LengthMismatchError(f"expected length {self.n_obs}, got {v.shape}")
        return v[:-2] - 2.0 * v[1:-1] + v[2:]

    def apply_transpose(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.n_rows,):
            raise LengthMismatchError(f"expected length {self.n_rows}, got {u.shape}")
        out = np.zeros(self.n_obs)
        out[:-2] += u
        out[1:-1] -= 2.0 * u
        out[2:] += u
        return out

    def gram_banded(self) -> np.ndarray:
        """D D' in upper banded form for scipy.linalg.solveh_banded.

        D D' is pentadiagonal Toeplitz with stencil (1, -4, 6, -4, 1).
        """
        m = self.n_rows
        ab = np.zeros((3, m))
        ab[0, 2:] = 1.0
        ab[1, 1:] = -4.0
        ab[2, :] = 6.0
        return ab


def apply_D(op: SecondDifferenceOperator, v: np.ndarray) -> np.ndarray:
    return op.apply(v)


@dataclass(frozen=True)
class TrendFilterProblem:
    """Observations plus penalty and stopping parameters."""

    y: np.ndarray
    lam: float
    tolerance: float = 1e-8
    max_iterations: int = 200

    def __post_init__(self):
        object.__setattr__(self, "y", np.ascontiguousarray(self.y, dtype=np.float64))
        if self.y.ndim != 1 or self.y.size < 1:
            raise ValueError("y must be a nonempty vector")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True)
class TrendFilterSolution:
    """Estimated trend x with the residual y - x and solver diagnostics."""

    x: np.ndarray
    residual: np.ndarray
    objective_value: float
    kkt_residual: float
    iterations: int
    converged: bool


def l1tf_objective(problem: TrendFilterProblem, x: np.ndarray) -> float:
    """(1/2)||y - x||_2^2 + lam * ||D x||_1."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != problem.y.shape:
        raise LengthMismatchError(f"x has shape {x.shape}, y has {problem.y.shape}")
    fit = 0.5 * float(np.sum((problem.y - x) ** 2))
    if problem.y.size < 3:
        return fit
    op = SecondDifferenceOperator(problem.y.size)
    return fit + problem.lam * float(np.sum(np.abs(op.apply(x))))


def _kkt_residual(op, lam, z, dx):
    """Max violation of the first-order conditions at (x, u=z).

    Stationarity x - y + D'z = 0 holds by construction, so what remains is
    dual feasibility ||z||_inf <= lam and complementarity
    z_i = lam * sign((Dx)_i) wherever (Dx)_i != 0, measured per component as
    lam*|Dx_i| - z_i*Dx_i (whose total equals the duality gap).
    """
    comp = lam * np.abs(dx) - z * dx
    feas = float(np.max(np.abs(z)) - lam) if z.size else 0.0
    return max(float(np.max(comp)) if comp.size else 0.0, feas, 0.0)


def l1tf_solve(problem: TrendFilterProblem) -> TrendFilterSolution:
    """Solve the trend-filter problem via a primal-dual interior point.

    Returns the exact observations for degenerate sizes (n_obs < 3) and for
    lam = 0. On hitting max_iterations the best iterate is still returned
    with converged=False.
    """
    y = problem.y
    n = y.size
    lam = float(problem.lam)
    if n < 3 or lam == 0.0:
        return TrendFilterSolution(
            x=y.copy(), residual=np.zeros(n),
            objective_value=l1tf_objective(problem, y),
            kkt_residual=0.0, iterations=0, converged=True)

    op = SecondDifferenceOperator(n)
    m = op.n_rows
    dy = op.apply(y)
    gram = op.gram_banded()

    alpha, beta, mu_factor = 0.01, 0.5, 2.0
    max_ls = 40

    z = np.zeros(m)
    mu1 = np.ones(m)
    mu2 = np.ones(m)
    t_barrier = 1e-10
    step = np.inf

    best = None
    iterations = 0
    converged = False
    for iterations in range(problem.max_iterations + 1):
        dtz = op.apply_transpose(z)
        ddtz = op.apply(dtz)
        dx = dy - ddtz                       # = D(y - D'z) = Dx
        pobj = 0.5 * float(dtz @ dtz) + lam * float(np.sum(np.abs(dx)))
        dobj = -0.5 * float(dtz @ dtz) + float(dy @ z)
        gap = pobj - dobj
        kkt = _kkt_residual(op, lam, z, dx)
        if best is None or kkt < best[1]:
            best = (z.copy(), kkt)
        if gap <= problem.tolerance and kkt <= problem.tolerance:
            converged = True
            break
        if iterations == problem.max_iterations:
            break

        if step >= 0.2:
            t_barrier = max(2.0 * m * mu_factor / gap, 1.2 * t_barrier)

        f1 = z - lam
        f2 = -z - lam
        r_dual = ddtz - dy + mu1 - mu2
        r_cent1 = -mu1 * f1 - 1.0 / t_barrier
        r_cent2 = -mu2 * f2 - 1.0 / t_barrier
        res_norm = np.sqrt(r_dual @ r_dual + r_cent1 @ r_cent1 + r_cent2 @ r_cent2)

        diag = mu1 / (lam - z) + mu2 / (lam + z)
        system = gram.copy()
        system[2, :] += diag
        rhs = -ddtz + dy + (1.0 / t_barrier) / f1 - (1.0 / t_barrier) / f2
        dz = solveh_banded(system, rhs)
        dmu1 = -(mu1 + ((1.0 / t_barrier) + dz * mu1) / f1)
        dmu2 = -(mu2 + ((1.0 / t_barrier) - dz * mu2) / f2)

        # longest multiplier-positive step, then backtrack on the residual
        step = 1.0
        neg1 = dmu1 < 0
        neg2 = dmu2 < 0
        if np.any(neg1):
            step = min(step, 0.99 * float(np.min(-mu1[neg1] / dmu1[neg1])))
        if np.any(neg2):
            step = min(step, 0.99 * float(np.min(-mu2[neg2] / dmu2[neg2])))
        for _ in range(max_ls):
            new_z = z + step * dz
            new_mu1 = mu1 + step * dmu1
            new_mu2 = mu2 + step * dmu2
            new_f1 = new_z - lam
            new_f2 = -new_z - lam
            if np.max(new_f1) < 0 and np.max(new_f2) < 0:
                new_ddtz = op.apply(op.apply_transpose(new_z))
                nr_dual = new_ddtz - dy + new_mu1 - new_mu2
                nr_c1 = -new_mu1 * new_f1 - 1.0 / t_barrier
                nr_c2 = -new_mu2 * new_f2 - 1.0 / t_barrier
                new_norm = np.sqrt(nr_dual @ nr_dual + nr_c1 @ nr_c1 + nr_c2 @ nr_c2)
                if new_norm <= (1.0 - alpha * step) * res_norm:
                    break
            step *= beta
        z, mu1, mu2 = new_z, new_mu1, new_mu2

    if not converged:
        z = best[0]
    x = y - op.apply_transpose(z)
    dx = op.apply(x)
    return TrendFilterSolution(
        x=x,
        residual=y - x,
        objective_value=l1tf_objective(problem, x),
        kkt_residual=_kkt_residual(op, lam, z, dx),
        iterations=iterations,
        converged=converged,
    )


def lambda_max(y: np.ndarray) -> float:
    """Smallest penalty at which the solution collapses to the affine fit.

    Computed as ||(D D')^{-1} D y||_inf via the pentadiagonal system.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.size < 3:
        raise LengthMismatchError("lambda_max needs a vector of length >= 3")
    op = SecondDifferenceOperator(y.size)
    u = solveh_banded(op.gram_banded(), op.apply(y))
    return float(np.max(np.abs(u)))


def l1_trend_filter(y, lam, tolerance: float = 1e-8,
                    max_iterations: int = 200) -> TrendFilterSolution:
    """Convenience wrapper building the problem and solving it."""
    return l1tf_solve(TrendFilterProblem(y=np.asarray(y, dtype=np.float64), lam=lam,
                                         tolerance=tolerance, max_iterations=max_iterations))


def augment_with_trend(windows, lam: float, mode: str = "target-only",
                       tolerance: float = 1e-8, max_iterations: int = 200):
    """Append filtered-trend channels to each window.

    The filter sees only the window's own T_i input values (causal: no
    target steps, no neighbors). Trend channels are appended after the
    original channels, in source-channel order. Windows are assumed to be
    in scaled units, so one lam fits every series.
    """
    windows = list(windows)
    if not windows:
        raise ValueError("augment_with_trend needs at least one window")
    if mode not in AUGMENT_MODES:
        raise ValueError(f"mode must be one of {AUGMENT_MODES}, got {mode!r}")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    sources = [0] if mode == "target-only" else list(range(windows[0].n_channels))
    out = []
    for w in windows:
        trend_rows = []
        for ch in sources:
            sol = l1_trend_filter(w.inputs[ch], lam, tolerance, max_iterations)
            if not sol.converged:
                warnings.warn(
                    f"trend filter hit {max_iterations} iterations on window at "
                    f"origin {w.origin_index} (channel {ch}, kkt {sol.kkt_residual:.2e})",
                    TrendFilterWarning)
            trend_rows.append(sol.x)
        out.append(Window(inputs=np.vstack([w.inputs, *[r[None, :] for r in trend_rows]]),
                          targets=w.targets, origin_index=w.origin_index))
    return out
