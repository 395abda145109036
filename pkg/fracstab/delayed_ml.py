"""
Delayed perturbed Mittag-Leffler matrix function with two delays.

    E^{h1,h2}_{lam,nu}(A0, A1, A2; t)
        = sum_k sum_{m1,m2} Q_{k+1}(m1 h1, m2 h2) (t - m1 h1 - m2 h2)_+^{k lam + nu - 1} / Gamma(k lam + nu)

for t > 0, the identity at t = 0 and the zero matrix for t < 0. The Q matrices
follow

    Q_{k+1}(m1, m2) = A0 Q_k(m1, m2) + A1 Q_k(m1 - 1, m2) + A2 Q_{k+1}(m1, m2 - 1)

with Q_1(0, 0) = I, Q_1 = 0 elsewhere and zero outside the index range.

Tables are stored divided by s^(k-1), s = max(1, |A0| + |A1|), so that long
k-series stay inside the double range; the factor s^k is folded into the
power weights in log space.
"""

import logging
import math
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from fracstab.errors import DimensionMismatch, DomainError, NonConvergence
from fracstab.specfun import DEFAULT_POLICY, TruncationPolicy

logger = logging.getLogger(__name__)

NORM_MODES = ("operator", "frobenius")

# lattice points within this fraction of a delay of t are counted as reached
_LATTICE_EPS = 1e-12


def matrix_norm(a: np.ndarray, mode: str = "operator") -> float:
    """Operator 2-norm (largest singular value) or Frobenius norm."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if mode == "operator":
        return float(np.linalg.norm(a, 2))
    if mode == "frobenius":
        return float(np.linalg.norm(a, "fro"))
    raise DomainError(f"unknown norm mode {mode!r}; expected one of {NORM_MODES}")


@dataclass(frozen=True, eq=False)
class MatrixTriple:
    a0: np.ndarray
    a1: np.ndarray
    a2: np.ndarray

    def __post_init__(self):
        shapes = []
        for name in ("a0", "a1", "a2"):
            m = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise DimensionMismatch(f"{name} must be a square matrix, got shape {m.shape}")
            m.setflags(write=False)
            object.__setattr__(self, name, m)
            shapes.append(m.shape)
        if len(set(shapes)) != 1:
            raise DimensionMismatch(f"A0, A1, A2 differ in size: {shapes}")

    @property
    def n(self) -> int:
        return self.a0.shape[0]

    @classmethod
    def zeros(cls, n: int) -> "MatrixTriple":
        return cls(np.zeros((n, n)), np.zeros((n, n)), np.zeros((n, n)))

    @classmethod
    def scalars(cls, a0: float, a1: float, a2: float) -> "MatrixTriple":
        return cls([[a0]], [[a1]], [[a2]])

    def norms(self, mode: str = "operator") -> Tuple[float, float, float]:
        return (matrix_norm(self.a0, mode), matrix_norm(self.a1, mode), matrix_norm(self.a2, mode))

    def majorant_triple(self, mode: str = "operator") -> "MatrixTriple":
        """1x1 triple of norms; its delayed ML function bounds the matrix one."""
        return MatrixTriple.scalars(*self.norms(mode))


@dataclass(frozen=True)
class DelayPair:
    h1: float
    h2: float

    def __post_init__(self):
        if not (self.h1 > 0 and self.h2 > 0):
            raise DomainError(f"delays must be positive, got h1={self.h1}, h2={self.h2}")

    @property
    def h(self) -> float:
        return max(self.h1, self.h2)


@dataclass(frozen=True)
class DMLQuery:
    lam: float
    nu: float
    t: float

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise DomainError(f"lambda must lie in (0, 1), got {self.lam}")


@dataclass(frozen=True, eq=False)
class QTable:
    """Q_k(m1, m2) for k = 0..kmax+1, stored as Q_k / scale**(k-1)."""

    scaled: np.ndarray
    scale: float
    generated_for: MatrixTriple

    @property
    def kmax(self) -> int:
        return self.scaled.shape[0] - 2

    @property
    def m1max(self) -> int:
        return self.scaled.shape[1] - 1

    @property
    def m2max(self) -> int:
        return self.scaled.shape[2] - 1

    def entry(self, k: int, m1: int, m2: int) -> np.ndarray:
        n = self.scaled.shape[-1]
        if k < 1 or m1 < 0 or m2 < 0:
            return np.zeros((n, n))
        if k > self.kmax + 1 or m1 > self.m1max or m2 > self.m2max:
            raise IndexError(f"Q_{k}({m1},{m2}) outside table (kmax={self.kmax}, "
                             f"m1max={self.m1max}, m2max={self.m2max})")
        return self.scaled[k, m1, m2] * self.scale ** (k - 1)


def _table_scale(m: MatrixTriple) -> float:
    return max(1.0, matrix_norm(m.a0) + matrix_norm(m.a1))


def build_q_table(m: MatrixTriple, kmax: int, m1max: int, m2max: int,
                  scale: Optional[float] = None) -> QTable:
    """Run the Q recursion, ascending m2 within each level k+1."""
    if kmax < 1 or m1max < 0 or m2max < 0:
        raise DomainError(f"need kmax >= 1, m1max >= 0, m2max >= 0 (got {kmax}, {m1max}, {m2max})")
    n = m.n
    s = _table_scale(m) if scale is None else float(scale)
    a0s = m.a0 / s
    a1s = m.a1 / s
    q = np.zeros((kmax + 2, m1max + 1, m2max + 1, n, n))
    q[1, 0, 0] = np.eye(n)
    for k in range(1, kmax + 1):
        nxt = np.matmul(a0s, q[k])
        if m1max > 0:
            nxt[1:] += np.matmul(a1s, q[k, :-1])
        for j in range(1, m2max + 1):
            nxt[:, j] += np.matmul(m.a2, nxt[:, j - 1])
        q[k + 1] = nxt
    q.setflags(write=False)
    return QTable(scaled=q, scale=s, generated_for=m)


def _power_weights(x: np.ndarray, k: int, e: float, a: float, log_s: float,
                   closed: bool = False) -> np.ndarray:
    """s^k x_+^e / Gamma(a) elementwise.

    Zero where x <= 0, or x < 0 when ``closed`` (then 0^0 = 1).
    """
    out = np.zeros_like(x)
    if a <= 0 and a == math.floor(a):
        return out
    mask = (x >= 0) if closed else (x > 0)
    if not mask.any():
        return out
    xm = x[mask]
    if a > 0:
        logw = k * log_s - special.gammaln(a)
        if e != 0.0:
            with np.errstate(divide="ignore"):
                logw = logw + e * np.log(xm)
        out[mask] = np.exp(logw)
    else:
        out[mask] = special.rgamma(a) * math.exp(k * log_s) * np.power(xm, e)
    return out


@dataclass
class DMLResult:
    value: np.ndarray
    truncation_bound: float
    terms: int


class DelayedMittagLeffler:
    """Evaluator for one (A0, A1, A2; h1, h2) instance.

    The Q table is memoized and grown on demand under a lock; a grown table is
    never mutated, so evaluations may run from several threads.
    """

    def __init__(self, matrices: MatrixTriple, delays: DelayPair,
                 policy: TruncationPolicy = DEFAULT_POLICY):
        self.matrices = matrices
        self.delays = delays
        self.policy = policy
        self.scale = _table_scale(matrices)
        self._log_scale = math.log(self.scale)
        self._table: Optional[QTable] = None
        self._lock = threading.Lock()
        self._majorants: Dict[str, "DelayedMittagLeffler"] = {}

    @property
    def n(self) -> int:
        return self.matrices.n

    def table(self, kmax: int, m1max: int, m2max: int) -> QTable:
        with self._lock:
            t = self._table
            if t is None or t.kmax < kmax or t.m1max < m1max or t.m2max < m2max:
                if t is not None:
                    kmax, m1max, m2max = max(kmax, t.kmax), max(m1max, t.m1max), max(m2max, t.m2max)
                logger.debug(f"building Q table kmax={kmax} m1max={m1max} m2max={m2max}")
                t = build_q_table(self.matrices, kmax, m1max, m2max, scale=self.scale)
                self._table = t
            return t

    def majorant(self, mode: str = "operator") -> "DelayedMittagLeffler":
        """Scalar evaluator with |A0|, |A1|, |A2| in place of the matrices."""
        with self._lock:
            ev = self._majorants.get(mode)
            if ev is None:
                ev = DelayedMittagLeffler(self.matrices.majorant_triple(mode), self.delays, self.policy)
                self._majorants[mode] = ev
            return ev

    def _lattice(self, tmax: float) -> np.ndarray:
        d = self.delays
        m1max = max(0, int(math.floor(tmax / d.h1 + _LATTICE_EPS)))
        m2max = max(0, int(math.floor(tmax / d.h2 + _LATTICE_EPS)))
        return (np.arange(m1max + 1)[:, None] * d.h1 + np.arange(m2max + 1)[None, :] * d.h2)

    def _series(self, lattice: np.ndarray, weights: Callable[[int], np.ndarray],
                lam: float, nu: float, pol: TruncationPolicy) -> Tuple[np.ndarray, np.ndarray, int]:
        """Sum over k of sum_m Q_{k+1}(m) w_k(m) for a batch of weight rows.

        A batch entry stops contributing to the convergence test once two
        consecutive term norms decrease and the geometric tail estimate falls
        under the policy threshold.
        """
        m1max, m2max = lattice.shape[0] - 1, lattice.shape[1] - 1
        kcap = int(pol.max_terms)
        table = self.table(min(64, kcap), m1max, m2max)
        q = table.scaled[:, : m1max + 1, : m2max + 1]
        total = None
        prev1 = prev2 = None
        bound = None
        converged = None
        for k in range(kcap):
            if k + 1 > table.kmax + 1:
                table = self.table(min(2 * table.kmax, kcap), m1max, m2max)
                q = table.scaled[:, : m1max + 1, : m2max + 1]
            w = weights(k)
            term = np.einsum("bij,ijpq->bpq", w, q[k + 1])
            if total is None:
                total = term.copy()
                batch = term.shape[0]
                bound = np.zeros(batch)
                converged = np.zeros(batch, dtype=bool)
                prev1 = np.full(batch, np.inf)
                prev2 = np.full(batch, np.inf)
            else:
                total += term
            tn = np.sqrt((term.reshape(term.shape[0], -1) ** 2).sum(axis=1))
            if not np.all(np.isfinite(total)):
                raise NonConvergence(
                    f"delayed ML series overflowed at k={k} (lam={lam}, nu={nu})",
                    terms=k + 1, reason="overflow")
            if k >= 2 and k * lam + nu >= 1.5:
                both_zero = (tn == 0.0) & (prev1 == 0.0)
                decreasing = (tn < prev1) & (prev1 < prev2)
                safe_prev = np.where(prev1 > 0, prev1, 1.0)
                r = tn / safe_prev
                tail = np.where(both_zero, 0.0,
                                np.where(decreasing & (r < 1.0), tn * r / (1.0 - np.minimum(r, 0.999999)), np.inf))
                size = np.sqrt((total.reshape(total.shape[0], -1) ** 2).sum(axis=1))
                done = tail <= np.maximum(pol.rel_tol * size, pol.abs_tol)
                newly = done & ~converged
                bound[newly] = tail[newly]
                converged |= done
                if converged.all():
                    return total, bound, k + 1
            prev2, prev1 = prev1, tn
        raise NonConvergence(
            f"delayed ML series not converged after {kcap} terms (lam={lam}, nu={nu})", terms=kcap)

    def evaluate_many(self, ts: Sequence[float], lam: float, nu: float,
                      pol: Optional[TruncationPolicy] = None) -> DMLResult:
        """Batch evaluation; value has shape (len(ts), n, n)."""
        pol = pol or self.policy
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        out = np.zeros((ts.size, self.n, self.n))
        out[ts == 0.0] = np.eye(self.n)
        pos = ts > 0
        if not pos.any():
            return DMLResult(out, 0.0, 0)
        tp = ts[pos]
        lattice = self._lattice(float(tp.max()))
        x = tp[:, None, None] - lattice[None, :, :]
        log_s = self._log_scale

        def weights(k: int) -> np.ndarray:
            a = k * lam + nu
            return _power_weights(x, k, a - 1.0, a, log_s)

        vals, bound, terms = self._series(lattice, weights, lam, nu, pol)
        out[pos] = vals
        return DMLResult(out, float(bound.max()), terms)

    def evaluate(self, t: float, lam: float, nu: float,
                 pol: Optional[TruncationPolicy] = None) -> DMLResult:
        res = self.evaluate_many([t], lam, nu, pol)
        return DMLResult(res.value[0], res.truncation_bound, res.terms)

    def __call__(self, t: float, lam: float, nu: float) -> np.ndarray:
        return self.evaluate(t, lam, nu).value

    def regular_part_many(self, ts: Sequence[float], lam: float, nu: float,
                          pol: Optional[TruncationPolicy] = None) -> np.ndarray:
        """Series with the factor (t - c)^(lam - 1) removed from every lattice term.

        Exponents become k lam + nu - lam >= 0 for nu in {0, lam}, so the result
        is bounded and right-continuous on [0, T]; used for the M2..M4 maxima.
        """
        pol = pol or self.policy
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        if (ts < 0).any():
            raise DomainError("regular part is defined for t >= 0 only")
        lattice = self._lattice(float(ts.max()))
        x = ts[:, None, None] - lattice[None, :, :]
        log_s = self._log_scale

        def weights(k: int) -> np.ndarray:
            a = k * lam + nu
            return _power_weights(x, k, a - lam, a, log_s, closed=True)

        vals, _, _ = self._series(lattice, weights, lam, nu, pol)
        return vals

    def kernel_integrals(self, lam: float, nu: float, lo: Sequence[float], hi: Sequence[float],
                         pol: Optional[TruncationPolicy] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Exact panel integrals of the kernel over argument intervals [lo, hi].

        Returns (I0, J) with I0 = int_lo^hi E(x) dx and J = int_lo^hi E(x) (hi - x) dx,
        both shaped (len(lo), n, n). Each lattice term integrates in closed form
        through P_a(y) = y_+^a / Gamma(a + 1), so the power singularities of the
        kernel are integrated exactly.
        """
        pol = pol or self.policy
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if lo.shape != hi.shape or (hi < lo).any():
            raise DomainError("kernel panels need matching lo <= hi arrays")
        nb = lo.size
        i0 = np.zeros((nb, self.n, self.n))
        j1 = np.zeros((nb, self.n, self.n))
        live = hi > 0
        if not live.any():
            return i0, j1
        lo_l, hi_l = lo[live], hi[live]
        lattice = self._lattice(float(hi_l.max()))
        xl = lo_l[:, None, None] - lattice[None, :, :]
        xh = hi_l[:, None, None] - lattice[None, :, :]
        width = (hi_l - lo_l)[:, None, None]
        log_s = self._log_scale

        def weights(k: int) -> np.ndarray:
            a = k * lam + nu
            if a <= 0 and a == math.floor(a):
                return np.zeros((2 * lo_l.size,) + lattice.shape)
            p1_hi = _power_weights(xh, k, a, a + 1.0, log_s)
            p1_lo = _power_weights(xl, k, a, a + 1.0, log_s)
            p2_hi = _power_weights(xh, k, a + 1.0, a + 2.0, log_s)
            p2_lo = _power_weights(xl, k, a + 1.0, a + 2.0, log_s)
            w0 = p1_hi - p1_lo
            w1 = p2_hi - p2_lo - width * p1_lo
            return np.concatenate([w0, w1], axis=0)

        vals, _, _ = self._series(lattice, weights, lam, nu, pol)
        m = lo_l.size
        i0[live] = vals[:m]
        j1[live] = vals[m:]
        return i0, j1


def dml_eval(m: MatrixTriple, d: DelayPair, q: DMLQuery,
             pol: TruncationPolicy = DEFAULT_POLICY) -> np.ndarray:
    return DelayedMittagLeffler(m, d, pol).evaluate(q.t, q.lam, q.nu).value


def dml_norm_majorant(m: MatrixTriple, d: DelayPair, q: DMLQuery,
                      pol: TruncationPolicy = DEFAULT_POLICY, mode: str = "operator") -> float:
    """Scalar delayed ML series with norms in place of matrices (never below |E(t)|)."""
    if q.t < 0:
        raise DomainError(f"majorant needs t >= 0, got {q.t}")
    ev = DelayedMittagLeffler(m.majorant_triple(mode), d, pol)
    return float(ev.evaluate(q.t, q.lam, q.nu).value[0, 0])
