"""
Monte-Carlo simulation of the mild solution

    y(t) = [history part] + int_0^t E_{lam,lam}(t - s) f(s, ...) ds
                          + int_0^t E_{lam,lam}(t - s) sigma(s, ...) dW(s)

marched forward on a delay-commensurate grid. f and sigma are taken at the
left node of every panel, so y(t_i) only depends on earlier nodes and on the
increments up to step i. The kernel enters through its exact panel integrals
(drift) and panel averages (noise).

Wiener increments come from a counter-based generator keyed by the seed with
the path id in the counter, so every path is reproducible on its own and the
order in which paths are simulated does not matter.
"""

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from fracstab.delayed_ml import DelayedMittagLeffler
from fracstab.detsolve import (
    CoefficientFn,
    Grid,
    HistoryFn,
    KernelTable,
    SystemSpec,
    history_terms_on_grid,
    moment_lipschitz,
    weight_denominators,
)
from fracstab.errors import DimensionMismatch, DomainError, PathExplosion
from fracstab.specfun import DEFAULT_POLICY, TruncationPolicy

logger = logging.getLogger(__name__)

DUMP_MAGIC = 0x46534450  # "FSDP"


@dataclass(frozen=True)
class NoiseFn:
    """sigma(t, y, y(t-h1), y(t-h2)) -> (..., n, q).

    ``lipschitz`` and ``n_args`` have the drift meaning, in the Frobenius norm.
    """

    evaluator: Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    q: int = 1
    lipschitz: float = 0.0
    growth: float = 0.0
    name: str = "custom"
    n_args: int = 3

    def __post_init__(self):
        if int(self.q) < 1:
            raise DomainError(f"Wiener dimension q must be >= 1, got {self.q}")

    def __call__(self, t, y, y1, y2) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        out = np.asarray(self.evaluator(np.asarray(t, dtype=float), y, y1, y2), dtype=float)
        shape = y.shape + (self.q,)
        try:
            return np.broadcast_to(out, shape)
        except ValueError:
            raise DimensionMismatch(f"noise returned shape {out.shape}, expected {shape}")

    def moment_lipschitz(self, p: float) -> float:
        return moment_lipschitz(self.lipschitz, self.n_args, p)

    @classmethod
    def zero(cls, q: int = 1) -> "NoiseFn":
        return cls(lambda t, y, y1, y2: np.zeros(y.shape + (q,)), q, 0.0, 0.0, "zero")

    @classmethod
    def constant(cls, matrix) -> "NoiseFn":
        s = np.atleast_2d(np.asarray(matrix, dtype=float))
        q = s.shape[1]
        growth = float(np.linalg.norm(s, "fro"))
        return cls(lambda t, y, y1, y2: np.broadcast_to(s, y.shape[:-1] + s.shape).copy(),
                   q, 0.0, growth, "constant")


@dataclass(frozen=True)
class PathConfig:
    n_paths: int
    seed: int
    grid: Grid
    p_moment: float = 2.0
    gamma: float = 1.0
    q: Optional[int] = None
    magnitude_cap: float = 1e12
    chunk_size: int = 64
    threads: int = 1
    keep_paths: bool = True

    def __post_init__(self):
        if self.n_paths < 1:
            raise DomainError(f"n_paths must be >= 1, got {self.n_paths}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.p_moment < 2:
            raise DomainError(f"moment order p must be >= 2, got {self.p_moment}")
        if not self.gamma > 0:
            raise DomainError(f"gamma must be positive, got {self.gamma}")
        if not self.magnitude_cap > 0:
            raise DomainError("magnitude_cap must be positive")
        if self.chunk_size < 1 or self.threads < 1:
            raise DomainError("chunk_size and threads must be >= 1")

    def check_window(self, lam: float) -> None:
        lo = (self.p_moment - 1.0) / self.p_moment
        if not lo < lam < 1.0:
            raise DomainError(f"lambda={lam} outside ((p-1)/p, 1) = ({lo:g}, 1) for p={self.p_moment:g}")


@dataclass
class SamplePath:
    path_id: int
    values: np.ndarray
    wiener_increments: np.ndarray


@dataclass
class MomentEstimate:
    """E|y(t)|^p on [-h, T] with standard errors and running-max moments."""

    times: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    n_paths: int
    p: float
    running_max_mean: np.ndarray

    @classmethod
    def from_paths(cls, times: np.ndarray, values: np.ndarray, p: float) -> "MomentEstimate":
        norms = np.linalg.norm(values, axis=2)
        powered = norms ** p
        n_paths = values.shape[0]
        mean = powered.mean(axis=0)
        if n_paths > 1:
            stderr = powered.std(axis=0, ddof=1) / math.sqrt(n_paths)
        else:
            stderr = np.zeros_like(mean)
        running = (np.maximum.accumulate(norms, axis=1) ** p).mean(axis=0)
        return cls(np.asarray(times, dtype=float), mean, stderr, n_paths, p, running)

    def weighted_norm(self, lam: float, gamma: float) -> float:
        return weighted_norm(self, lam, self.p, gamma)


@dataclass
class SimulationResult:
    times: np.ndarray
    history_steps: int
    values: np.ndarray
    increments: np.ndarray
    moments: MomentEstimate
    paths: List[SamplePath] = field(default_factory=list)

    @property
    def mean_path(self) -> np.ndarray:
        return self.values.mean(axis=0)


def gen_wiener(cfg: PathConfig, path_id: int, q: Optional[int] = None) -> np.ndarray:
    """Increments dW for one path, shape (N, q), covariance step * I_q per row."""
    if not 0 <= path_id < cfg.n_paths:
        raise DomainError(f"path_id {path_id} outside [0, {cfg.n_paths})")
    q = q or cfg.q or 1
    bitgen = np.random.Philox(key=int(cfg.seed), counter=[0, 0, int(path_id), 0])
    rng = np.random.Generator(bitgen)
    return rng.standard_normal((cfg.grid.n_steps, q)) * math.sqrt(cfg.grid.step)


def stochastic_convolution(sys: SystemSpec, kernel: Union[KernelTable, DelayedMittagLeffler],
                           integrand: np.ndarray, increments: np.ndarray, t_index: int,
                           step: Optional[float] = None) -> np.ndarray:
    """sum_{j < i} Kbar_{i-1-j} sigma_j dW_j with Kbar the kernel's panel averages.

    ``kernel`` is either a prebuilt E_{lam,lam} table or an evaluator, in which
    case ``step`` is required to build the table.
    """
    n_steps = increments.shape[0]
    if not 0 <= t_index <= n_steps:
        raise DomainError(f"t_index {t_index} outside [0, {n_steps}]")
    if isinstance(kernel, DelayedMittagLeffler):
        if step is None:
            raise DomainError("step is required when passing a kernel evaluator")
        kernel = KernelTable.build(kernel, sys.lam, sys.lam, step, max(1, t_index))
    if t_index == 0:
        return np.zeros(sys.n)
    g = np.einsum("jnq,jq->jn", integrand[:t_index], increments[:t_index])
    kbar = kernel.panel_average[:t_index][::-1]
    return np.einsum("jpq,jq->p", kbar, g)


class _Marcher:
    """Shared, read-only state for marching batches of paths."""

    def __init__(self, sys: SystemSpec, phi: HistoryFn, f: CoefficientFn, g: NoiseFn,
                 cfg: PathConfig, kernel: DelayedMittagLeffler):
        grid = cfg.grid
        self.sys, self.f, self.g, self.cfg = sys, f, g, cfg
        self.n_steps = grid.n_steps
        self.n1 = grid.lag(sys.delays.h1)
        self.n2 = grid.lag(sys.delays.h2)
        self.mh = max(self.n1, self.n2)
        self.q = g.q
        self.nodes = phi.on_nodes(grid.step, self.mh)
        self.tab = KernelTable.build(kernel, sys.lam, sys.lam, grid.step, self.n_steps)
        self.hist = history_terms_on_grid(sys, phi, grid, kernel, table_lam=self.tab)
        self.grid_times = grid.times
        self.times = (np.arange(self.mh + self.n_steps + 1) - self.mh) * grid.step

    def run(self, ids: Sequence[int]):
        cfg, n_steps, mh = self.cfg, self.n_steps, self.mh
        batch = len(ids)
        n = self.sys.n
        dw = np.stack([gen_wiener(cfg, pid, self.q) for pid in ids])
        y = np.empty((batch, mh + n_steps + 1, n))
        y[:, : mh + 1] = self.nodes
        drift = np.zeros((batch, n_steps, n))
        noise = np.zeros((batch, n_steps, n))
        i0 = self.tab.moment0
        kbar = self.tab.panel_average
        for i in range(1, n_steps + 1):
            j = i - 1
            row = mh + j
            tj = np.full(batch, self.grid_times[j])
            args = (tj, y[:, row], y[:, row - self.n1], y[:, row - self.n2])
            drift[:, j] = self.f(*args)
            noise[:, j] = np.einsum("bnq,bq->bn", self.g(*args), dw[:, j])
            yi = (self.hist[i]
                  + np.einsum("lpq,blq->bp", i0[:i], drift[:, j::-1])
                  + np.einsum("lpq,blq->bp", kbar[:i], noise[:, j::-1]))
            mag = np.abs(yi).max(axis=1)
            bad = ~np.isfinite(mag) | (mag > cfg.magnitude_cap)
            if bad.any():
                k = int(np.argmax(bad))
                raise PathExplosion(int(ids[k]), float(self.grid_times[i]), float(mag[k]), cfg.magnitude_cap)
            y[:, mh + i] = yi
        return y, dw


def simulate_paths(sys: SystemSpec, phi: HistoryFn, f: CoefficientFn, g: NoiseFn, cfg: PathConfig,
                   kernel: Optional[DelayedMittagLeffler] = None,
                   pol: TruncationPolicy = DEFAULT_POLICY,
                   chunk_order: Optional[Sequence[int]] = None) -> SimulationResult:
    """Simulate cfg.n_paths paths and aggregate their p-th moments.

    Paths are split into chunks of cfg.chunk_size ids; chunks may run on
    several threads and in any order, results are assembled by path id.
    """
    cfg.check_window(sys.lam)
    if cfg.q is not None and cfg.q != g.q:
        raise DimensionMismatch(f"noise has q={g.q}, config asks for q={cfg.q}")
    if phi.n != sys.n:
        raise DimensionMismatch(f"history has {phi.n} components, system has {sys.n}")
    kernel = kernel or DelayedMittagLeffler(sys.matrices, sys.delays, pol)
    marcher = _Marcher(sys, phi, f, g, cfg, kernel)

    starts = list(range(0, cfg.n_paths, cfg.chunk_size))
    chunks = [list(range(s, min(s + cfg.chunk_size, cfg.n_paths))) for s in starts]
    order = list(chunk_order) if chunk_order is not None else list(range(len(chunks)))
    if sorted(order) != list(range(len(chunks))):
        raise DomainError("chunk_order must be a permutation of the chunk indices")
    logger.info(f"🚀 simulating {cfg.n_paths} paths x {marcher.n_steps} steps "
                f"({len(chunks)} chunks, {cfg.threads} threads)")
    results: List = [None] * len(chunks)
    if cfg.threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            futures = {pool.submit(marcher.run, chunks[ci]): ci for ci in order}
            for fut in as_completed(futures):
                results[futures[fut]] = fut.result()
    else:
        for ci in order:
            results[ci] = marcher.run(chunks[ci])

    values = np.concatenate([r[0] for r in results], axis=0)
    increments = np.concatenate([r[1] for r in results], axis=0)
    moments = MomentEstimate.from_paths(marcher.times, values, cfg.p_moment)
    paths = []
    if cfg.keep_paths:
        paths = [SamplePath(pid, values[pid], increments[pid]) for pid in range(cfg.n_paths)]
    return SimulationResult(marcher.times, marcher.mh, values, increments, moments, paths)


def weighted_norm(est: MomentEstimate, lam: float, p: float, gamma: float) -> float:
    """max over t >= 0 of E[y*(t)^p] / E_{p lam - p + 1}(gamma t^{p lam - p + 1})."""
    mask = est.times >= -1e-12
    t = np.clip(est.times[mask], 0.0, None)
    den = weight_denominators(t, lam, p, gamma)
    return float(np.max(est.running_max_mean[mask] / den))


def write_binary_paths(path: Path, values: np.ndarray, q: int) -> Path:
    """Dump paths as a 16-byte header (magic, n, q, N as <u4) and <f8 rows."""
    values = np.asarray(values, dtype="<f8")
    if values.ndim == 2:
        values = values[None]
    n_rows, n = values.shape[1], values.shape[2]
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4I", DUMP_MAGIC, n, q, n_rows))
        fh.write(np.ascontiguousarray(values).tobytes())
    return path


def read_binary_paths(path: Path):
    """Inverse of write_binary_paths: returns (values[P, N, n], q)."""
    raw = Path(path).read_bytes()
    magic, n, q, n_rows = struct.unpack("<4I", raw[:16])
    if magic != DUMP_MAGIC:
        raise DomainError(f"{path} is not a path dump (magic {magic:#x})")
    data = np.frombuffer(raw[16:], dtype="<f8")
    return data.reshape(-1, n_rows, n), q
