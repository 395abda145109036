"""
Deterministic solver for the neutral fractional delay equation

    D^lam [y(t) - A2 y(t - h2)] = A0 y(t) + A1 y(t - h1) + f(t, y(t), y(t - h1), y(t - h2))

through its delayed Mittag-Leffler representation

    y(t) = E_{lam,1}(t) (phi(0) - A2 phi(-h2))
         + int_{-h1}^0 E_{lam,lam}(t - h1 - s) A1 phi(s) ds
         + int_{-h2}^0 E_{lam,0}(t - h2 - s) A2 phi(s) ds
         + int_0^t E_{lam,lam}(t - s) f(s, ...) ds.

Convolutions use product quadrature: the kernel is integrated exactly on each
panel, the smooth factor is interpolated linearly (trapezoid) or held at the
left node (rectangle).
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Callable, List, Optional

import numpy as np

from fracstab.delayed_ml import DelayedMittagLeffler, DelayPair, MatrixTriple
from fracstab.errors import DimensionMismatch, DomainError, NoConvergence
from fracstab.specfun import DEFAULT_POLICY, MLParams, TruncationPolicy, gamma_fn, ml_eval

logger = logging.getLogger(__name__)

_GRID_TOL = 1e-9

# E_mu with mu = p lam - p + 1 can have a very small order
WEIGHT_POLICY = TruncationPolicy(max_terms=5000)


@dataclass(frozen=True, eq=False)
class HistoryFn:
    """phi tabulated on t_j = -h + j*step, j = 0..M, linearly interpolated."""

    values: np.ndarray
    step: float
    h: float
    interpolation: str = "linear"

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        m = int(round(self.h / self.step))
        if self.step <= 0 or self.h <= 0 or abs(m * self.step - self.h) > _GRID_TOL * max(1.0, self.h):
            raise DomainError(f"history grid step {self.step} does not divide h={self.h}")
        if vals.shape[0] != m + 1:
            raise DimensionMismatch(f"history needs {m + 1} rows on [-h, 0], got {vals.shape[0]}")
        if not np.all(np.isfinite(vals)):
            raise DomainError("history values must be finite")
        if self.interpolation != "linear":
            raise DomainError(f"unsupported interpolation {self.interpolation!r}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.linspace(-self.h, 0.0, self.values.shape[0])

    @classmethod
    def from_callable(cls, fn: Callable[[float], object], h: float, step: float,
                      n: Optional[int] = None) -> "HistoryFn":
        m = int(round(h / step))
        ts = np.linspace(-h, 0.0, m + 1)
        rows = [np.atleast_1d(np.asarray(fn(t), dtype=float)) for t in ts]
        vals = np.array(rows)
        if n is not None and vals.shape[1] == 1 and n > 1:
            vals = np.repeat(vals, n, axis=1)
        return cls(vals, step, h)

    @classmethod
    def constant(cls, value, h: float, step: float, n: Optional[int] = None) -> "HistoryFn":
        v = np.atleast_1d(np.asarray(value, dtype=float))
        if n is not None and v.size == 1:
            v = np.full(n, float(v[0]))
        return cls.from_callable(lambda _t: v, h, step)

    def __call__(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if np.any(s < -self.h - _GRID_TOL * max(1.0, self.h)) or np.any(s > _GRID_TOL):
            raise DomainError(f"history queried outside [-{self.h}, 0]")
        ts = self.times
        cols = [np.interp(s, ts, self.values[:, i]) for i in range(self.n)]
        return np.stack(cols, axis=-1)

    def resample(self, step: float) -> "HistoryFn":
        if step == self.step:
            return self
        m = int(round(self.h / step))
        ts = np.linspace(-self.h, 0.0, m + 1)
        return HistoryFn(self(ts), step, self.h)

    def on_nodes(self, step: float, count: int) -> np.ndarray:
        """Values at -count*step, ..., 0 (count <= h/step)."""
        ts = -step * np.arange(count, -1, -1, dtype=float)
        return self(ts)

    def sup_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.values, axis=1)))


@dataclass(frozen=True)
class CoefficientFn:
    """Drift f(t, y, y(t-h1), y(t-h2)), batched over leading axes.

    ``lipschitz`` is the constant L of |f(y) - f(z)| <= L sum_j |y_j - z_j| over the
    ``n_args`` state arguments f actually reads (3 unless known otherwise);
    ``growth`` bounds |f(t, y, ...)| <= growth (1 + sum_j |y_j|).
    """

    evaluator: Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    lipschitz: float = 0.0
    growth: float = 0.0
    name: str = "custom"
    n_args: int = 3

    def __call__(self, t, y, y1, y2) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        out = np.asarray(self.evaluator(np.asarray(t, dtype=float), y, y1, y2), dtype=float)
        return np.broadcast_to(out, y.shape)

    def moment_lipschitz(self, p: float) -> float:
        """L_f with |f(y) - f(z)|^p <= L_f sum_j |y_j - z_j|^p, i.e. k^(p-1) L^p."""
        return moment_lipschitz(self.lipschitz, self.n_args, p)

    @classmethod
    def zero(cls) -> "CoefficientFn":
        return cls(lambda t, y, y1, y2: np.zeros_like(y), 0.0, 0.0, "zero")

    @classmethod
    def constant(cls, value) -> "CoefficientFn":
        c = np.asarray(value, dtype=float)
        norm = float(np.linalg.norm(np.atleast_1d(c)))
        return cls(lambda t, y, y1, y2: np.broadcast_to(c, y.shape).copy(), 0.0, norm, "constant")


def moment_lipschitz(lipschitz: float, n_args: int, p: float) -> float:
    # Jensen: (sum of k terms)^p <= k^(p-1) sum of p-th powers
    if lipschitz == 0.0:
        return 0.0
    return float(max(int(n_args), 1)) ** (p - 1.0) * float(lipschitz) ** p


def suggest_step(step: float, delays: DelayPair, horizon: float) -> float:
    """Largest step <= ``step`` dividing h1, h2 and the horizon."""
    fr = [Fraction(x).limit_denominator(10 ** 6) for x in (delays.h1, delays.h2, horizon)]
    common = 1
    for f in fr:
        common = common * f.denominator // math.gcd(common, f.denominator)
    g = 0
    for f in fr:
        g = math.gcd(g, int(f * common))
    base = Fraction(g, common)
    k = max(1, math.ceil(float(base) / step - 1e-12))
    return float(base / k)


@dataclass(frozen=True)
class Grid:
    step: float
    horizon: float

    def __post_init__(self):
        if not (self.step > 0 and self.horizon > 0):
            raise DomainError(f"grid needs step > 0 and horizon > 0, got {self.step}, {self.horizon}")
        n = round(self.horizon / self.step)
        if n < 1 or abs(n * self.step - self.horizon) > _GRID_TOL * max(1.0, self.horizon):
            raise DomainError(f"step {self.step} does not divide horizon {self.horizon}")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.step))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.step

    def lag(self, h: float) -> int:
        ratio = h / self.step
        r = int(round(ratio))
        if r < 1 or abs(ratio - r) > _GRID_TOL * max(1.0, ratio):
            raise DomainError(f"delay {h} is not a multiple of step {self.step}")
        return r

    @classmethod
    def for_system(cls, step: float, horizon: float, delays: DelayPair) -> "Grid":
        grid = cls(step, horizon)
        try:
            grid.lag(delays.h1)
            grid.lag(delays.h2)
        except DomainError:
            hint = suggest_step(step, delays, horizon)
            raise DomainError(
                f"step {step} is not commensurate with delays ({delays.h1}, {delays.h2}); "
                f"nearest commensurate step is {hint:g}")
        return grid


@dataclass(frozen=True, eq=False)
class SystemSpec:
    matrices: MatrixTriple
    delays: DelayPair
    lam: float
    horizon: float

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise DomainError(f"lambda must lie in (0, 1), got {self.lam}")
        if not self.horizon > 0:
            raise DomainError(f"horizon must be positive, got {self.horizon}")

    @property
    def n(self) -> int:
        return self.matrices.n

    @property
    def h(self) -> float:
        return self.delays.h


@dataclass(frozen=True, eq=False)
class KernelTable:
    """Panel integrals of E_{lam,nu} over [l*step, (l+1)*step], l = 0..N-1."""

    step: float
    nu: float
    moment0: np.ndarray
    moment1: np.ndarray

    @classmethod
    def build(cls, kernel: DelayedMittagLeffler, lam: float, nu: float,
              step: float, n_panels: int) -> "KernelTable":
        lags = np.arange(n_panels, dtype=float)
        i0, j1 = kernel.kernel_integrals(lam, nu, lags * step, (lags + 1.0) * step)
        return cls(step, nu, i0, j1)

    @cached_property
    def left_weights(self) -> np.ndarray:
        return self.moment0 - self.moment1 / self.step

    @cached_property
    def right_weights(self) -> np.ndarray:
        return self.moment1 / self.step

    @cached_property
    def panel_average(self) -> np.ndarray:
        return self.moment0 / self.step


def history_integrals(m: MatrixTriple, d: DelayPair, lam: float, phi: HistoryFn, t: float,
                      kernel: Optional[DelayedMittagLeffler] = None,
                      pol: TruncationPolicy = DEFAULT_POLICY) -> np.ndarray:
    """History part of the representation at any t >= 0."""
    if t < 0:
        raise DomainError(f"history integrals need t >= 0, got {t}")
    ev = kernel or DelayedMittagLeffler(m, d, pol)
    val = ev.evaluate(t, lam, 1.0).value @ (phi(0.0) - m.a2 @ phi(-d.h2))
    for a, h, nu in ((m.a1, d.h1, lam), (m.a2, d.h2, 0.0)):
        panels = max(1, math.ceil(h / phi.step - 1e-9))
        s = np.linspace(-h, 0.0, panels + 1)
        hi = t - h - s[:-1]
        if hi.max() <= 0:
            continue
        lo = t - h - s[1:]
        g = phi(s) @ a.T
        width = (s[1:] - s[:-1])[:, None, None]
        i0, j1 = ev.kernel_integrals(lam, nu, lo, hi)
        val = val + np.einsum("jpq,jq->p", i0 - j1 / width, g[:-1])
        val = val + np.einsum("jpq,jq->p", j1 / width, g[1:])
    return val


def history_terms_on_grid(sys: SystemSpec, phi: HistoryFn, grid: Grid,
                          kernel: DelayedMittagLeffler,
                          table_lam: Optional[KernelTable] = None) -> np.ndarray:
    """History part at every grid time t_0..t_N, shape (N+1, n)."""
    m, d, lam = sys.matrices, sys.delays, sys.lam
    n_steps, step = grid.n_steps, grid.step
    n1, n2 = grid.lag(d.h1), grid.lag(d.h2)
    mh = max(n1, n2)
    nodes = phi.on_nodes(step, mh)
    e1 = kernel.evaluate_many(grid.times, lam, 1.0).value
    out = np.einsum("tpq,q->tp", e1, nodes[mh] - m.a2 @ nodes[mh - n2])
    tab_lam = table_lam or KernelTable.build(kernel, lam, lam, step, n_steps)
    tab_zero = KernelTable.build(kernel, lam, 0.0, step, n_steps)
    for a, lag, tab in ((m.a1, n1, tab_lam), (m.a2, n2, tab_zero)):
        g = nodes[mh - lag:] @ a.T
        left, right = tab.left_weights, tab.right_weights
        # panel j = [s_j, s_{j+1}] reaches t_i with lag l = i - j - 1
        for j in range(lag):
            span = n_steps - j
            if span <= 0:
                break
            out[j + 1:] += np.einsum("lpq,q->lp", left[:span], g[j])
            out[j + 1:] += np.einsum("lpq,q->lp", right[:span], g[j + 1])
    return out


def convolve(tab: KernelTable, values: np.ndarray, rule: str = "trapezoid") -> np.ndarray:
    """int_0^{t_i} E(t_i - s) g(s) ds for every grid time, g given at t_0..t_N."""
    n_steps = values.shape[0] - 1
    out = np.zeros_like(values)
    if rule == "trapezoid":
        left, right = tab.left_weights, tab.right_weights
        for lag in range(n_steps):
            out[lag + 1:] += values[: n_steps - lag] @ left[lag].T
            out[lag + 1:] += values[1: n_steps - lag + 1] @ right[lag].T
    elif rule == "rectangle":
        for lag in range(n_steps):
            out[lag + 1:] += values[: n_steps - lag] @ tab.moment0[lag].T
    else:
        raise DomainError(f"unknown quadrature rule {rule!r}")
    return out


def weight_denominators(times: np.ndarray, lam: float, p: float, gamma: float,
                        pol: TruncationPolicy = WEIGHT_POLICY) -> np.ndarray:
    """E_mu(gamma t^mu) with mu = p lam - p + 1, the weighted-norm denominator."""
    mu = p * lam - p + 1.0
    if mu <= 0:
        raise DomainError(f"weighted norm needs lam > (p-1)/p; got lam={lam}, p={p}")
    if gamma <= 0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    params = MLParams(mu, 1.0)
    return np.array([ml_eval(params, gamma * float(t) ** mu, pol) for t in times])


def running_max_weighted(norms: np.ndarray, denominators: np.ndarray, p: float) -> float:
    """max_i (max_{j<=i} norms_j)^p / denominators_i."""
    running = np.maximum.accumulate(norms)
    return float(np.max(running ** p / denominators))


@dataclass
class Trajectory:
    times: np.ndarray
    values: np.ndarray
    history_steps: int
    iterations: int = 0
    distances: List[float] = field(default_factory=list)
    contraction_ratio: Optional[float] = None

    @property
    def grid_times(self) -> np.ndarray:
        return self.times[self.history_steps:]

    @property
    def grid_values(self) -> np.ndarray:
        return self.values[self.history_steps:]

    def ratios(self) -> List[float]:
        out = []
        for a, b in zip(self.distances, self.distances[1:]):
            out.append(b / a if a > 0 else 0.0)
        return out


def trajectory_weighted_norm(traj: Trajectory, lam: float, p: float, gamma: float) -> float:
    """Weighted norm of a single trajectory; the running max includes the history."""
    norms = np.linalg.norm(traj.values, axis=1)
    running = np.maximum.accumulate(norms)[traj.history_steps:]
    den = weight_denominators(traj.grid_times, lam, p, gamma)
    return float(np.max(running ** p / den))


def picard_solve(sys: SystemSpec, phi: HistoryFn, f: CoefficientFn, grid: Grid,
                 tol: float = 1e-12, max_iter: int = 100, p: float = 1.0, gamma: float = 1.0,
                 rule: str = "trapezoid", kernel: Optional[DelayedMittagLeffler] = None,
                 pol: TruncationPolicy = DEFAULT_POLICY) -> Trajectory:
    """Fixed point of the discretized representation by Picard iteration.

    Starts from y = phi(0) on (0, T]. Successive distances are measured in the
    discrete weighted norm max_i (running max |dy|)^p / E_mu(gamma t_i^mu).
    """
    if phi.n != sys.n:
        raise DimensionMismatch(f"history has {phi.n} components, system has {sys.n}")
    kernel = kernel or DelayedMittagLeffler(sys.matrices, sys.delays, pol)
    n_steps, step = grid.n_steps, grid.step
    n1, n2 = grid.lag(sys.delays.h1), grid.lag(sys.delays.h2)
    mh = max(n1, n2)
    nodes = phi.on_nodes(step, mh)
    tab = KernelTable.build(kernel, sys.lam, sys.lam, step, n_steps)
    hist = history_terms_on_grid(sys, phi, grid, kernel, table_lam=tab)
    hist[0] = nodes[mh]
    times_full = (np.arange(mh + n_steps + 1) - mh) * step
    den = weight_denominators(grid.times, sys.lam, p, gamma)

    y = np.empty((mh + n_steps + 1, sys.n))
    y[: mh + 1] = nodes
    y[mh + 1:] = nodes[mh]
    idx = np.arange(n_steps + 1) + mh
    distances: List[float] = []
    ratio: Optional[float] = None
    for it in range(1, max_iter + 1):
        forcing = f(grid.times, y[idx], y[idx - n1], y[idx - n2])
        new = hist + convolve(tab, forcing, rule)
        new[0] = nodes[mh]
        diff = np.linalg.norm(new - y[idx], axis=1)
        dist = running_max_weighted(diff, den, p)
        if distances and distances[-1] > 0:
            ratio = dist / distances[-1]
        distances.append(dist)
        y[idx] = new
        if dist <= tol:
            logger.debug(f"picard converged in {it} iterations (last ratio {ratio})")
            return Trajectory(times_full, y, mh, it, distances, ratio)
    raise NoConvergence(
        f"picard iteration did not reach tol={tol} in {max_iter} iterations "
        f"(last contraction ratio {ratio})", iterations=max_iter, last_ratio=ratio)


def caputo_residual(traj: Trajectory, sys: SystemSpec, f: CoefficientFn, grid: Grid,
                    start: Optional[float] = None) -> float:
    """Max over t_i >= start of |L1 Caputo derivative of y - A2 y(.-h2) minus the RHS|.

    The solution behaves like t^lam at the origin, where the L1 scheme has an
    O(1) local error at the first nodes for every step; ``start`` (default a
    tenth of the horizon) skips that initial layer.
    Only A2 = 0 residuals are expected to vanish: the representation solved here
    leaves an O(|A2|) mismatch with the neutral form.
    """
    m, lam = sys.matrices, sys.lam
    n_steps, step = grid.n_steps, grid.step
    n1, n2 = grid.lag(sys.delays.h1), grid.lag(sys.delays.h2)
    mh = traj.history_steps
    if traj.values.shape[0] != mh + n_steps + 1:
        raise DimensionMismatch("trajectory does not match the grid")
    y = traj.values
    idx = np.arange(n_steps + 1) + mh
    z = y[idx] - y[idx - n2] @ m.a2.T
    dz = np.diff(z, axis=0)
    j = np.arange(n_steps, dtype=float)
    b = (j + 1.0) ** (1.0 - lam) - j ** (1.0 - lam)
    coef = step ** (-lam) / gamma_fn(2.0 - lam)
    deriv = np.stack([np.convolve(dz[:, c], b)[:n_steps] for c in range(sys.n)], axis=1) * coef
    rhs = (y[idx] @ m.a0.T + y[idx - n1] @ m.a1.T
           + f(grid.times, y[idx], y[idx - n1], y[idx - n2]))[1:]
    res = np.linalg.norm(deriv - rhs, axis=1)
    start = 0.1 * grid.horizon if start is None else start
    window = grid.times[1:] >= start - 1e-12
    if not window.any():
        return 0.0
    return float(res[window].max())
