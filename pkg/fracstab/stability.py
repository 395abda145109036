"""
Constants, contraction check and finite-time-stability certificate.

M1..M4 are maxima over [0, T] of the scalar majorant (norms of A0, A1, A2 in
place of the matrices), raised to p. For nu = lam and nu = 0 the series is
singular at every lattice point, so M2..M4 maximize its regular part, the series
with (t - c)^(lam - 1) divided out of each term; then
|E_{lam,lam}(u)|^p <= M4 u^{p(lam-1)}.

Also verifies numerically the main lemma of the weighted-norm argument,

    gamma/Gamma(mu) int_0^t (t-s)^(mu-1) E_mu(gamma s^mu) ds = E_mu(gamma t^mu) - 1,
    mu = p lam - p + 1,

the Gronwall inequality with delays and the power-mean (Jensen) inequality.
"""

import csv
import io
import logging
import math
import warnings
from dataclasses import asdict, dataclass, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate

from fracstab import specfun
from fracstab.delayed_ml import DelayedMittagLeffler
from fracstab.detsolve import CoefficientFn, HistoryFn, SystemSpec
from fracstab.errors import DomainError, GridWarning, NonConvergence
from fracstab.specfun import (
    DEFAULT_POLICY,
    GAMMA_MAX_ARG,
    MLParams,
    TruncationPolicy,
    beta_fn,
    gamma_fn,
    log_beta,
    log_gamma,
    recip_gamma,
)
from fracstab.stochastic import NoiseFn

logger = logging.getLogger(__name__)

LEMMA_POLICY = TruncationPolicy(max_terms=2000)

_QUAD_EPSREL = 1e-9
_QUAD_EPSABS = 1e-14
_REFINE_TOL = 1e-6


@dataclass
class AssumptionConstants:
    # lf, lsig: |f(y) - f(z)|^p <= lf sum_j |y_j - z_j|^p, likewise for sigma
    m1: float
    m2: float
    m3: float
    m4: float
    phi_max: float
    f_at_zero: float
    lf: float
    lsig: float
    cp: float
    p: float
    horizon: float
    norm_a0: float
    norm_a1: float
    norm_a2: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v < 0 or math.isnan(v):
                raise DomainError(f"{f.name} must be nonnegative, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ContractionReport:
    k_value: float
    is_contraction: bool
    addend_f: float
    addend_sigma: float
    gamma: float
    p: float

    @property
    def breakdown(self) -> Tuple[float, float]:
        return self.addend_f, self.addend_sigma

    def to_dict(self) -> dict:
        return asdict(self)


# name -> formula tag written next to every certificate value
_CERT_TAGS = {
    "epsilon": "user supplied",
    "p": "moment order",
    "horizon": "T",
    "c_const": "5^(p-1) (Lf + Cp Ls) T^(p-1) M4",
    "m_tilde": "5^(p-1) M1 (1+|A2|^p) + 5^(p-1) (M2 |A1|^p + M3 |A2|^p) h^(p-1) + 2 C h^((p-1)/p)",
    "first_term": "eps / (Mtilde exp(C (3T - h1 - h2)))",
    "b_term": "5^(p-1) (Lf + Cp Ls) T^p M4",
    "lambda_threshold": "first_term - b_term",
    "phi_gamma": "Phi^p",
    "verdict": "Lambda > 0 and phi_gamma <= Lambda and Lambda < eps",
}


@dataclass
class StabilityCertificate:
    epsilon: float
    p: float
    horizon: float
    c_const: float
    m_tilde: float
    first_term: float
    b_term: float
    lambda_threshold: float
    phi_gamma: float
    verdict: bool
    diagnostic: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = []
        for name, tag in _CERT_TAGS.items():
            v = getattr(self, name)
            val = ("PASS" if v else "FAIL") if isinstance(v, bool) else repr(float(v))
            lines.append(f"{name}={val}  # {tag}")
        if self.diagnostic:
            lines.append(f"diagnostic={self.diagnostic}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "StabilityCertificate":
        raw: Dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            k, v = line.split("=", 1)
            if " #" in v:
                v = v.split(" #", 1)[0]
            raw[k.strip()] = v.strip()
        try:
            kwargs = {k: float(raw[k]) for k in _CERT_TAGS if k != "verdict"}
            kwargs["verdict"] = raw["verdict"] == "PASS"
        except KeyError as e:
            raise DomainError(f"certificate text is missing {e}")
        return cls(diagnostic=raw.get("diagnostic", ""), **kwargs)

    @staticmethod
    def csv_header() -> List[str]:
        return list(_CERT_TAGS)

    def csv_row(self) -> List[str]:
        row = []
        for name in _CERT_TAGS:
            v = getattr(self, name)
            row.append(("PASS" if v else "FAIL") if isinstance(v, bool) else repr(float(v)))
        return row


@dataclass
class MainLemmaCheck:
    lhs_series: float
    lhs_quad: float
    rhs: float
    identity_gap: float
    quad_gap: float

    @property
    def lhs(self) -> float:
        return self.lhs_series


@dataclass
class VerificationRow:
    check: str
    params: str
    value: float
    status: str
    detail: str = ""


def bdg_constant(p: float) -> float:
    """Moment constant for stochastic integrals: 1 for p = 2, the classical BDG bound above."""
    if p < 2:
        raise DomainError(f"BDG constant is used for p >= 2, got {p}")
    if p == 2:
        return 1.0
    return (p ** (p + 1) / (2.0 * (p - 1) ** (p - 1))) ** (p / 2.0)


def _grid_max(fn: Callable[[np.ndarray], np.ndarray], horizon: float, n_points: int,
              label: str) -> float:
    """Max of fn on an n-point grid over [0, T] plus a 3-point refinement at the argmax."""
    u = np.linspace(0.0, horizon, n_points)
    vals = fn(u)
    i = int(np.argmax(vals))
    best = float(vals[i])
    du = u[1] - u[0] if n_points > 1 else horizon
    nearby = np.clip(np.array([u[i] - du / 2, u[i] + du / 2]), 0.0, horizon)
    refined = max(best, float(np.max(fn(nearby))))
    if refined > best * (1.0 + _REFINE_TOL) + 1e-300:
        msg = f"{label}: refinement moved the max from {best:.6g} to {refined:.6g}; use a finer grid"
        logger.warning(f"⚠️ {msg}")
        warnings.warn(msg, GridWarning)
    return refined


def compute_constants(sys: SystemSpec, phi: HistoryFn, f: CoefficientFn, g: NoiseFn, p: float,
                      T: Optional[float] = None, pol: Optional[TruncationPolicy] = None,
                      cp: Optional[float] = None, grid_points: int = 2048,
                      norm_mode: str = "operator") -> AssumptionConstants:
    T = sys.horizon if T is None else T
    if not T > 0:
        raise DomainError(f"horizon must be positive, got {T}")
    pol = pol or DEFAULT_POLICY
    lam = sys.lam
    maj = DelayedMittagLeffler(sys.matrices, sys.delays, pol).majorant(norm_mode)

    def e1(u):
        return np.abs(maj.evaluate_many(u, lam, 1.0).value[:, 0, 0]) ** p

    def reg(nu):
        return lambda u: np.abs(maj.regular_part_many(u, lam, nu)[:, 0, 0]) ** p

    m1 = _grid_max(e1, T, grid_points, "M1")
    m4 = _grid_max(reg(lam), T, grid_points, "M4")
    m3 = _grid_max(reg(0.0), T, grid_points, "M3")

    u = np.linspace(0.0, T, grid_points)
    zeros = np.zeros((u.size, sys.n))
    f0 = np.linalg.norm(f(u, zeros, zeros, zeros), axis=1) ** p
    n0, n1, n2 = sys.matrices.norms(norm_mode)
    ac = AssumptionConstants(
        m1=m1, m2=m4, m3=m3, m4=m4,
        phi_max=phi.sup_norm(), f_at_zero=float(f0.max()),
        lf=f.moment_lipschitz(p), lsig=g.moment_lipschitz(p),
        cp=bdg_constant(max(p, 2.0)) if cp is None else cp,
        p=p, horizon=T, norm_a0=n0, norm_a1=n1, norm_a2=n2,
    )
    logger.info(f"✅ constants: M1={m1:.6g} M3={m3:.6g} M4={m4:.6g} Phi={ac.phi_max:.6g} F={ac.f_at_zero:.6g}")
    return ac


def contraction_k(ac: AssumptionConstants, p: float, lam: float, gamma: float,
                  T: float) -> ContractionReport:
    """K = 6^(p-1) M4 Gamma(mu) (Lf T^(p-1) + Ls T^((p-2)/2)) / gamma.

    Lf and Ls are the p-th moment constants stored in ``ac``; they already
    carry the power p.
    """
    mu = p * lam - p + 1.0
    if mu <= 0:
        raise DomainError(f"contraction constant needs lam > (p-1)/p; got lam={lam}, p={p}")
    if not gamma > 0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    c = 6.0 ** (p - 1) * ac.m4 * gamma_fn(mu)
    af = c * ac.lf * T ** (p - 1) / gamma
    asig = c * ac.lsig * T ** ((p - 2) / 2.0) / gamma
    k = af + asig
    return ContractionReport(k, k <= 1.0, af, asig, gamma, p)


def _check_nonnegative(name: str, fn: Callable[[float], float], lo: float, hi: float) -> None:
    for s in np.linspace(lo, hi, 17):
        v = fn(float(s))
        if v < 0:
            raise DomainError(f"{name} is negative at s={s:g} ({v:g})")


def _quad(fn: Callable[[float], float], a: float, b: float) -> float:
    if b <= a:
        return 0.0
    val, _ = integrate.quad(fn, a, b, epsrel=_QUAD_EPSREL, epsabs=_QUAD_EPSABS, limit=200)
    return val


def gronwall_bound(g_fn: Callable[[float], float], b_fn: Callable[[float], float],
                   c_fns: Sequence[Tuple[Callable[[float], float], float]],
                   psi: Callable[[float], float], t: float, t0: float = 0.0) -> float:
    """Gronwall bound with delays.

    If u(t) <= g(t) + int b u + sum_i int c_i(s) u(s - h_i) ds with u = psi before
    t0, then u(t) <= [g(t) + sum_i int_{[t0,t] in E_i} c_i(s) psi(s - h_i) ds]
    * exp(int b + sum_i int_{[t0,t] outside E_i} c_i), E_i = [t0, t0 + h_i].
    """
    if t < t0:
        raise DomainError(f"t={t} precedes t0={t0}")
    _check_nonnegative("g", g_fn, t0, t)
    _check_nonnegative("b", b_fn, t0, t)
    gs = [g_fn(float(s)) for s in np.linspace(t0, t, 17)]
    if any(b < a - 1e-12 * max(1.0, abs(a)) for a, b in zip(gs, gs[1:])):
        raise DomainError("g must be nondecreasing")
    pre = g_fn(t)
    expo = _quad(b_fn, t0, t)
    for i, (c, h) in enumerate(c_fns):
        if h <= 0:
            raise DomainError(f"delay h_{i} must be positive, got {h}")
        _check_nonnegative(f"c_{i}", c, t0, t)
        _check_nonnegative("psi", psi, t0 - h, t0)
        edge = min(t, t0 + h)
        pre += _quad(lambda s, c=c, h=h: c(s) * psi(s - h), t0, edge)
        expo += _quad(c, edge, t)
    return pre * math.exp(expo)


@dataclass
class GronwallInstance:
    """Linear delay inequality with increasing coefficients, simulated by forward substitution."""

    g0: float
    g1: float
    b0: float
    b1: float
    c0: List[float]
    c1: List[float]
    lags: List[int]
    psi0: float
    kappa: float
    step: float
    t0: float = 0.0

    @classmethod
    def random(cls, rng: np.random.Generator, step: float = 0.01,
               horizon: float = 2.0) -> "GronwallInstance":
        n_delays = int(rng.integers(1, 3))
        n_steps = int(round(horizon / step))
        g0 = float(rng.uniform(0.1, 1.0))
        return cls(
            g0=g0, g1=float(rng.uniform(0, 1)),
            b0=float(rng.uniform(0, 1)), b1=float(rng.uniform(0, 0.5)),
            c0=[float(x) for x in rng.uniform(0, 1, n_delays)],
            c1=[float(x) for x in rng.uniform(0, 0.5, n_delays)],
            lags=[int(x) for x in rng.integers(5, n_steps // 2, n_delays)],
            psi0=float(rng.uniform(0, g0)), kappa=float(rng.uniform(0, 2)),
            step=step,
        )

    def g(self, s: float) -> float:
        return self.g0 + self.g1 * (s - self.t0)

    def b(self, s: float) -> float:
        return self.b0 + self.b1 * (s - self.t0)

    def c(self, i: int) -> Callable[[float], float]:
        return lambda s: self.c0[i] + self.c1[i] * (s - self.t0)

    def psi(self, s: float) -> float:
        return self.psi0 * math.exp(self.kappa * (s - self.t0))

    @property
    def delays(self) -> List[float]:
        return [d * self.step for d in self.lags]

    def simulate(self, n_points: int) -> Tuple[np.ndarray, np.ndarray]:
        """u_k = g(t_k) + step * sum_{j<k} [b_j u_j + sum_i c_i(t_j) u(t_j - h_i)]."""
        ts = self.t0 + self.step * np.arange(n_points)
        u = np.zeros(n_points)
        acc = 0.0
        for k in range(n_points):
            if k > 0:
                j = k - 1
                inc = self.b(ts[j]) * u[j]
                for i, d in enumerate(self.lags):
                    back = u[j - d] if j >= d else self.psi(ts[j] - d * self.step)
                    inc += self.c(i)(ts[j]) * back
                acc += self.step * inc
            u[k] = self.g(ts[k]) + acc
        return ts, u

    def bound(self, t: float) -> float:
        cs = [(self.c(i), h) for i, h in enumerate(self.delays)]
        return gronwall_bound(self.g, self.b, cs, self.psi, t, self.t0)


def fts_certificate(ac: AssumptionConstants, sys: SystemSpec, p: float, T: float,
                    epsilon: float, phi_norm: Optional[float] = None) -> StabilityCertificate:
    if not epsilon > 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    d = sys.delays
    h = d.h
    five = 5.0 ** (p - 1)
    lip = ac.lf + ac.cp * ac.lsig
    c = five * lip * T ** (p - 1) * ac.m4
    m_tilde = (five * ac.m1 * (1.0 + ac.norm_a2 ** p)
               + five * (ac.m2 * ac.norm_a1 ** p + ac.m3 * ac.norm_a2 ** p) * h ** (p - 1)
               + 2.0 * c * h ** ((p - 1) / p))
    b = five * lip * T ** p * ac.m4
    expo = c * (3.0 * T - d.h1 - d.h2)
    try:
        first = epsilon / (m_tilde * math.exp(expo))
    except OverflowError:
        first = math.exp(math.log(epsilon) - math.log(m_tilde) - expo)
    lam_thr = first - b
    phi_gamma = ac.phi_max ** p if phi_norm is None else phi_norm

    if lam_thr <= 0:
        diag = f"Lambda={lam_thr:.6g} <= 0: eps/(Mtilde e^(C(3T-h1-h2)))={first:.6g} does not exceed B={b:.6g}"
    elif phi_gamma > lam_thr:
        diag = f"history norm {phi_gamma:.6g} exceeds Lambda={lam_thr:.6g}"
    elif not lam_thr < epsilon:
        diag = f"Lambda={lam_thr:.6g} is not below eps={epsilon:.6g}"
    else:
        diag = ""
    verdict = lam_thr > 0 and phi_gamma <= lam_thr and lam_thr < epsilon
    return StabilityCertificate(epsilon, p, T, c, m_tilde, first, b, lam_thr, phi_gamma, verdict, diag)


def _lemma_series(mu: float, z: float, pol: TruncationPolicy) -> float:
    """sum_k z^(k+1) B(mu, k mu + 1) / (Gamma(mu) Gamma(k mu + 1)), the integrated series."""
    total = 0.0
    prev = math.inf
    log_z = math.log(z)
    log_g_mu = log_gamma(mu)
    for k in range(int(pol.max_terms)):
        a = k * mu + 1.0
        coef = 0.0
        if a + mu < GAMMA_MAX_ARG:
            coef = beta_fn(mu, a) * recip_gamma(mu) * recip_gamma(a)
        if coef > 0:
            log_term = (k + 1) * log_z + math.log(coef)
        else:
            log_term = (k + 1) * log_z + log_beta(mu, a) - log_g_mu - log_gamma(a)
        if log_term > 709.0:
            raise NonConvergence(f"main-lemma series overflows at k={k}", terms=k, reason="overflow")
        term = math.exp(log_term)
        total += term
        if term < prev and term <= pol.threshold(total) * 1e-3:
            return total
        prev = term
    raise NonConvergence(f"main-lemma series not converged in {pol.max_terms} terms",
                         terms=int(pol.max_terms))


def verify_main_lemma(p: float, lam: float, gamma: float, t: float,
                      pol: Optional[TruncationPolicy] = None) -> MainLemmaCheck:
    lo = (p - 1.0) / p
    if not lo < lam < 1.0:
        raise DomainError(f"lam={lam} outside ({lo:g}, 1) for p={p:g}")
    if not gamma > 0 or not t > 0:
        raise DomainError(f"need gamma > 0 and t > 0, got gamma={gamma}, t={t}")
    pol = pol or LEMMA_POLICY
    mu = p * lam - p + 1.0
    params = MLParams(mu, 1.0)
    z = gamma * t ** mu
    rhs = specfun.ml_eval(params, z, pol)
    lhs_series = _lemma_series(mu, z, pol)

    def integrand(s: float) -> float:
        return specfun.ml_eval(params, gamma * s ** mu, pol)

    raw, _ = integrate.quad(integrand, 0.0, t, weight="alg", wvar=(0.0, mu - 1.0),
                            epsabs=0.0, epsrel=1e-10, limit=200)
    lhs_quad = gamma * recip_gamma(mu) * raw
    scale = max(1.0, abs(rhs))
    return MainLemmaCheck(
        lhs_series=lhs_series,
        lhs_quad=lhs_quad,
        rhs=rhs,
        identity_gap=abs(lhs_series - (rhs - 1.0)) / scale,
        quad_gap=abs(lhs_quad - (rhs - 1.0)) / scale,
    )


def verify_jensen(values: Sequence[float], p: float) -> bool:
    """(sum y_i)^p <= m^(p-1) sum y_i^p."""
    if p <= 1:
        raise DomainError(f"Jensen check needs p > 1, got {p}")
    y = np.asarray(values, dtype=float)
    if (y < 0).any():
        raise DomainError("Jensen check needs nonnegative values")
    m = y.size
    if m == 0:
        return True
    lhs = float(y.sum()) ** p
    rhs = m ** (p - 1) * float((y ** p).sum())
    return lhs <= rhs * (1.0 + 1e-12)


COROLLARY_CASES = (
    (1.0, 0.7, 1.0, 1.0),
    (2.0, 0.8, 2.0, 1.5),
)


def _fmt_params(**kw) -> str:
    return ",".join(f"{k}={v:g}" for k, v in kw.items())


def run_verification_sweep(ps: Sequence[float] = (1.0, 1.5, 2.0),
                           lams: Sequence[float] = (0.6, 0.75, 0.9),
                           gammas: Sequence[float] = (0.5, 1.0, 5.0),
                           ts: Sequence[float] = (0.5, 1.0, 2.0),
                           gronwall_trials: int = 100, jensen_trials: int = 1000,
                           seed: int = 0, tol: float = 1e-8, quad_tol: float = 1e-6,
                           quad: bool = True) -> List[VerificationRow]:
    """Main lemma over the (p, lam, gamma, t) grid, the two corollary cases,
    Gronwall domination on random instances and randomized Jensen checks."""
    rows: List[VerificationRow] = []
    cases = [(p, lam, g, t) for p in ps for lam in lams for g in gammas for t in ts]
    cases += list(COROLLARY_CASES)
    for i, (p, lam, g, t) in enumerate(cases):
        check = "corollary" if i >= len(cases) - len(COROLLARY_CASES) else "main_lemma"
        params = _fmt_params(p=p, lam=lam, gamma=g, t=t)
        lo = (p - 1.0) / p
        if math.isclose(lam, lo, abs_tol=1e-12):
            rows.append(VerificationRow(check, params, math.nan, "SKIPPED(boundary)"))
            continue
        if lam < lo:
            continue
        try:
            res = verify_main_lemma(p, lam, g, t)
        except NonConvergence as e:
            rows.append(VerificationRow(check, params, math.nan, "SKIPPED(range)", str(e)))
            continue
        ok = res.identity_gap < tol
        detail = ""
        if quad:
            ok = ok and res.quad_gap < quad_tol
            detail = f"quad_gap={res.quad_gap:.3e}"
        rows.append(VerificationRow(check, params, res.identity_gap, "PASS" if ok else "FAIL", detail))

    rng = np.random.default_rng(seed)
    worst = math.inf
    failures = 0
    for _ in range(gronwall_trials):
        inst = GronwallInstance.random(rng)
        times, u = inst.simulate(201)
        for k in range(0, times.size, 20):
            slack = inst.bound(float(times[k])) - u[k]
            worst = min(worst, slack)
            if slack < -1e-9 * max(1.0, u[k]):
                failures += 1
    if gronwall_trials:
        rows.append(VerificationRow("gronwall", f"trials={gronwall_trials}", worst,
                                    "PASS" if failures == 0 else "FAIL",
                                    f"violations={failures}"))

    for p in (2.0, 3.0):
        if not jensen_trials:
            break
        vals = rng.uniform(0.0, 10.0, size=(jensen_trials, 3))
        bad = sum(not verify_jensen(v, p) for v in vals)
        rows.append(VerificationRow("jensen", _fmt_params(p=p, trials=jensen_trials), float(bad),
                                    "PASS" if bad == 0 else "FAIL"))
    return rows


def sweep_table(rows: Sequence[VerificationRow]) -> str:
    """CSV rendering of verification rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["check", "params", "value", "status", "detail"])
    for r in rows:
        w.writerow([r.check, r.params, repr(r.value), r.status, r.detail])
    return buf.getvalue()
