"""
Scalar special functions.

Gamma (Lanczos, g=7, nine coefficients, reflection below 1/2), reciprocal
gamma, beta, and the two-parameter Mittag-Leffler series

    E_{alpha,beta}(z) = sum_n z^n / Gamma(alpha n + beta)

summed in log space with a geometric tail bound. Everything here is a pure
function of its arguments.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

from fracstab.errors import DomainError, NonConvergence, PoleError

_LANCZOS_G = 7
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_SQRT_2PI = math.sqrt(2.0 * math.pi)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_EPS = 2.220446049250313e-16
_LOG_MAX = 709.0

# Largest x with a finite Gamma(x) in double precision.
GAMMA_MAX_ARG = 171.6243769563027


@dataclass(frozen=True)
class MLParams:
    """Orders of E_{alpha,beta}. beta defaults to 1 (one-parameter function)."""

    alpha: float
    beta: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise DomainError(f"Mittag-Leffler order alpha must be > 0, got {self.alpha}")


@dataclass(frozen=True)
class TruncationPolicy:
    rel_tol: float = 1e-12
    abs_tol: float = 1e-300
    max_terms: int = 500

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise DomainError(f"rel_tol must be > 0, got {self.rel_tol}")
        if not self.abs_tol >= 0:
            raise DomainError(f"abs_tol must be >= 0, got {self.abs_tol}")
        if int(self.max_terms) < 1:
            raise DomainError(f"max_terms must be >= 1, got {self.max_terms}")

    def threshold(self, magnitude: float) -> float:
        return max(self.rel_tol * abs(magnitude), self.abs_tol)


DEFAULT_POLICY = TruncationPolicy()


@dataclass(frozen=True)
class SeriesResult:
    value: float
    error_bound: float
    terms: int


def _is_nonpositive_integer(x: float) -> bool:
    return x <= 0 and x == math.floor(x)


def _lanczos_sum(x: float) -> float:
    a = _LANCZOS_COEF[0]
    for i in range(1, len(_LANCZOS_COEF)):
        a += _LANCZOS_COEF[i] / (x + i)
    return a


def gamma_fn(x: float) -> float:
    """Gamma(x) for real x; ~15 significant digits on (0, 170)."""
    x = float(x)
    if math.isnan(x):
        return math.nan
    if _is_nonpositive_integer(x):
        raise PoleError(f"gamma has a pole at x={x:g}")
    if x > GAMMA_MAX_ARG:
        raise OverflowError(f"gamma({x:g}) exceeds the double range")
    if x < 0.5:
        s = math.sin(math.pi * x)
        try:
            return math.pi / (s * gamma_fn(1.0 - x))
        except OverflowError:
            # |Gamma(x)| below the smallest double
            return math.copysign(0.0, s)
    x -= 1.0
    t = x + _LANCZOS_G + 0.5
    half = t ** ((x + 0.5) / 2.0)
    return _SQRT_2PI * half * (half * math.exp(-t)) * _lanczos_sum(x)


def log_gamma(x: float) -> float:
    """log|Gamma(x)|, finite far beyond the range of gamma_fn."""
    x = float(x)
    if _is_nonpositive_integer(x):
        raise PoleError(f"log-gamma has a pole at x={x:g}")
    if x < 0.5:
        return math.log(math.pi / abs(math.sin(math.pi * x))) - log_gamma(1.0 - x)
    x -= 1.0
    t = x + _LANCZOS_G + 0.5
    return _LOG_SQRT_2PI + (x + 0.5) * math.log(t) - t + math.log(_lanczos_sum(x))


@lru_cache(maxsize=4096)
def recip_gamma(x: float) -> float:
    """1/Gamma(x); exactly 0 at 0, -1, -2, ... and where Gamma overflows."""
    x = float(x)
    if _is_nonpositive_integer(x):
        return 0.0
    try:
        g = gamma_fn(x)
    except OverflowError:
        return 0.0
    if g == 0.0:
        return math.copysign(math.inf, g)
    return 1.0 / g


def beta_fn(a: float, b: float) -> float:
    """B(a, b) = Gamma(a) Gamma(b) / Gamma(a + b) for a, b > 0."""
    if not (a > 0 and b > 0):
        raise DomainError(f"beta needs a > 0 and b > 0, got ({a}, {b})")
    if a + b < GAMMA_MAX_ARG:
        return gamma_fn(a) * gamma_fn(b) / gamma_fn(a + b)
    return math.exp(log_beta(a, b))


def log_beta(a: float, b: float) -> float:
    if not (a > 0 and b > 0):
        raise DomainError(f"beta needs a > 0 and b > 0, got ({a}, {b})")
    return log_gamma(a) + log_gamma(b) - log_gamma(a + b)


def _ml_term(alpha: float, beta: float, z: float, log_abs_z: float, n: int) -> float:
    a = alpha * n + beta
    if a <= 0:
        # only the first few terms when beta <= 0; Gamma may be negative here
        return (z ** n) * recip_gamma(a)
    mag = n * log_abs_z - log_gamma(a)
    if mag > _LOG_MAX:
        raise NonConvergence(
            f"E_{{{alpha:g},{beta:g}}}({z:g}): term {n} overflows", terms=n, reason="overflow")
    term = math.exp(mag)
    return -term if (z < 0 and n % 2 == 1) else term


def ml_series(params: MLParams, z: float, pol: TruncationPolicy = DEFAULT_POLICY) -> SeriesResult:
    """Sum the Mittag-Leffler series and report the truncation bound.

    Term ratios |t_{n+1}/t_n| = |z| Gamma(a_n)/Gamma(a_n + alpha) decrease in n
    once a_n = alpha n + beta > 0, so after the first ratio below one the
    remaining tail is bounded by |t_n| r / (1 - r). The reported error bound adds
    a rounding estimate proportional to sum |t_n|. For negative z of large modulus
    that estimate exceeds the tolerance and the sum is refused with
    NonConvergence(reason="cancellation"); E_{1,1}(z) = 1 / E_{1,1}(-z) avoids it.
    """
    alpha, beta = params.alpha, params.beta
    z = float(z)
    if z == 0.0:
        return SeriesResult(recip_gamma(beta), 0.0, 1)
    if z < 0.0 and alpha == 1.0 and beta == 1.0:
        pos = ml_series(params, -z, pol)
        value = 1.0 / pos.value
        return SeriesResult(value, pos.error_bound * value / pos.value, pos.terms)
    log_abs_z = math.log(abs(z))
    total = 0.0
    abs_total = 0.0
    prev = 0.0
    for n in range(int(pol.max_terms)):
        term = _ml_term(alpha, beta, z, log_abs_z, n)
        total += term
        abs_total += abs(term)
        if not math.isfinite(total):
            raise NonConvergence(
                f"E_{{{alpha:g},{beta:g}}}({z:g}) overflowed", terms=n + 1, reason="overflow")
        if n >= 1 and prev != 0.0 and alpha * (n - 1) + beta > 0:
            r = abs(term / prev)
            if r < 1.0:
                tail = abs(term) * r / (1.0 - r)
                if tail <= pol.threshold(total):
                    rounding = 2.0 * _EPS * abs_total
                    if rounding > pol.threshold(total):
                        raise NonConvergence(
                            f"E_{{{alpha:g},{beta:g}}}({z:g}): cancellation, rounding {rounding:.3g} "
                            f"against |sum| {abs(total):.3g}", terms=n + 1, reason="cancellation")
                    return SeriesResult(total, tail + rounding, n + 1)
        prev = term
    raise NonConvergence(
        f"E_{{{alpha:g},{beta:g}}}({z:g}) not converged after {pol.max_terms} terms",
        terms=int(pol.max_terms))


def ml_eval(params: MLParams, z: float, pol: TruncationPolicy = DEFAULT_POLICY) -> float:
    return ml_series(params, z, pol).value
