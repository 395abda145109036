"""
Experiment configs, orchestration and output files.

Config files are flat text with one level of named blocks:

    # comment
    [system]
    dimension = 2
    a0 = -1 2 0 1        # row-major
    h1 = 1
    ...

Parsing is total: any problem raises ConfigError carrying the 1-based line
number. Every run writes a manifest.json listing its outputs with their
SHA-256, so two runs with the same config and seed can be compared byte for
byte.
"""

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from fracstab import __version__
from fracstab.coefficients import BUILTIN_TAGS, HISTORY_KINDS, make_drift, make_history, make_noise
from fracstab.delayed_ml import DelayedMittagLeffler, DelayPair, MatrixTriple
from fracstab.detsolve import Grid, HistoryFn, SystemSpec, picard_solve, suggest_step
from fracstab.errors import ConfigError, DomainError
from fracstab.settings import Settings
from fracstab.specfun import TruncationPolicy
from fracstab.stability import (
    AssumptionConstants,
    StabilityCertificate,
    compute_constants,
    contraction_k,
    fts_certificate,
)
from fracstab.stochastic import PathConfig, SimulationResult, simulate_paths, write_binary_paths

logger = logging.getLogger(__name__)

MOMENTS_HEADER = ["t", "mean_p_moment", "stderr", "n_paths"]
_OFF = ("", "off", "no", "false", "none")

# block -> key -> (kind, required, default)
_SCHEMA: Dict[str, Dict[str, Tuple[str, bool, object]]] = {
    "system": {
        "dimension": ("int", True, None),
        "a0": ("list", True, None),
        "a1": ("list", True, None),
        "a2": ("list", True, None),
        "h1": ("float", True, None),
        "h2": ("float", True, None),
        "lambda": ("float", True, None),
    },
    "history": {
        "kind": ("str", False, "zero"),
        "value": ("float", False, 0.0),
        "scale": ("float", False, 1.0),
    },
    "coefficients": {
        "drift": ("str", False, "zero"),
        "drift_scale": ("float", False, 1.0),
        "noise": ("str", False, "zero"),
        "noise_scale": ("float", False, 1.0),
    },
    "simulation": {
        "horizon": ("float", True, None),
        "step": ("float", True, None),
        "n_paths": ("int", False, 100),
        "seed": ("int", False, 0),
        "p": ("float", False, 2.0),
        "gamma": ("float", False, 1.0),
        "q": ("int", False, None),
        "magnitude_cap": ("float", False, 1e12),
    },
    "certificate": {
        "epsilon": ("float", False, 1.0),
        "cp": ("float", False, None),
        "grid_points": ("int", False, 2048),
    },
    "series": {
        "rel_tol": ("float", False, 1e-12),
        "abs_tol": ("float", False, 1e-300),
        "max_terms": ("int", False, 5000),
    },
    "output": {
        "directory": ("str", False, ""),
        "moments_csv": ("str", False, "moments.csv"),
        "paths_csv": ("str", False, "off"),
        "mean_path_csv": ("str", False, "mean_path.csv"),
        "trajectory_csv": ("str", False, "trajectory.csv"),
        "certificate": ("str", False, "certificate.txt"),
        "binary_dump": ("str", False, "off"),
    },
}


@dataclass
class OutputSpec:
    directory: str = ""
    moments_csv: str = "moments.csv"
    paths_csv: Optional[str] = None
    mean_path_csv: Optional[str] = "mean_path.csv"
    trajectory_csv: Optional[str] = "trajectory.csv"
    certificate: Optional[str] = "certificate.txt"
    binary_dump: Optional[str] = None


@dataclass
class ExperimentConfig:
    name: str
    text: str
    dimension: int
    a0: List[float]
    a1: List[float]
    a2: List[float]
    h1: float
    h2: float
    lam: float
    horizon: float
    step: float
    history_kind: str = "zero"
    history_value: float = 0.0
    history_scale: float = 1.0
    drift: str = "zero"
    drift_scale: float = 1.0
    noise: str = "zero"
    noise_scale: float = 1.0
    n_paths: int = 100
    seed: int = 0
    p: float = 2.0
    gamma: float = 1.0
    q: Optional[int] = None
    magnitude_cap: float = 1e12
    epsilon: float = 1.0
    cp: Optional[float] = None
    grid_points: int = 2048
    rel_tol: float = 1e-12
    abs_tol: float = 1e-300
    max_terms: int = 5000
    output: OutputSpec = field(default_factory=OutputSpec)

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    @property
    def noise_q(self) -> int:
        return self.q if self.q is not None else self.dimension

    def matrices(self) -> MatrixTriple:
        n = self.dimension
        return MatrixTriple(*(np.array(a, dtype=float).reshape(n, n) for a in (self.a0, self.a1, self.a2)))

    def delays(self) -> DelayPair:
        return DelayPair(self.h1, self.h2)

    def system(self) -> SystemSpec:
        return SystemSpec(self.matrices(), self.delays(), self.lam, self.horizon)

    def grid(self) -> Grid:
        return Grid.for_system(self.step, self.horizon, self.delays())

    def policy(self) -> TruncationPolicy:
        return TruncationPolicy(self.rel_tol, self.abs_tol, self.max_terms)

    def history(self) -> HistoryFn:
        return make_history(self.history_kind, self.history_value, self.history_scale,
                            max(self.h1, self.h2), self.step, self.dimension)

    def drift_fn(self):
        return make_drift(self.drift, self.drift_scale, self.dimension)

    def noise_fn(self):
        return make_noise(self.noise, self.noise_scale, self.dimension, self.noise_q)

    def path_config(self, settings: Optional[Settings] = None,
                    threads: Optional[int] = None) -> PathConfig:
        settings = settings or Settings.from_env()
        return PathConfig(
            n_paths=self.n_paths, seed=self.seed, grid=self.grid(),
            p_moment=self.p, gamma=self.gamma, q=self.noise_q,
            magnitude_cap=self.magnitude_cap, chunk_size=settings.chunk_size,
            threads=threads or settings.threads,
            keep_paths=False,
        )

    def output_dir(self, settings: Optional[Settings] = None) -> Path:
        if self.output.directory:
            return Path(self.output.directory)
        settings = settings or Settings.from_env()
        return settings.output_dir / self.name


def _parse_value(kind: str, raw: str, key: str, line: int):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError
            return v
        if kind == "list":
            parts = raw.replace(",", " ").split()
            if not parts:
                raise ValueError
            return [float(x) for x in parts]
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind}", line)
    return raw


def parse_config(text: str, name: str = "config") -> ExperimentConfig:
    """Parse config text; raises ConfigError(line=...) on the first problem."""
    values: Dict[str, Dict[str, object]] = {}
    lines: Dict[str, int] = {}
    block: Optional[str] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if " #" in line:
            line = line.split(" #", 1)[0].rstrip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed block header {line!r}", lineno)
            block = line[1:-1].strip().lower()
            if block not in _SCHEMA:
                raise ConfigError(f"unknown block [{block}]", lineno)
            if block in values:
                raise ConfigError(f"block [{block}] appears twice", lineno)
            values[block] = {}
            lines[block] = lineno
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {line!r}", lineno)
        if block is None:
            raise ConfigError("key outside of any block", lineno)
        k, v = line.split("=", 1)
        k = k.strip().lower()
        v = v.strip()
        if (v.startswith('"') and v.endswith('"')) or (v.startswith("'") and v.endswith("'")):
            v = v[1:-1]
        if k not in _SCHEMA[block]:
            raise ConfigError(f"unknown key {k!r} in [{block}]", lineno)
        if k in values[block]:
            raise ConfigError(f"duplicate key {k!r} in [{block}]", lineno)
        kind = _SCHEMA[block][k][0]
        values[block][k] = _parse_value(kind, v, k, lineno)
        lines[f"{block}.{k}"] = lineno

    def get(block: str, key: str):
        kind, required, default = _SCHEMA[block][key]
        if key in values.get(block, {}):
            return values[block][key]
        if required:
            raise ConfigError(f"missing required key {key!r} in [{block}]", lines.get(block, 0))
        return default

    def at(block: str, key: str) -> int:
        return lines.get(f"{block}.{key}", lines.get(block, 0))

    n = get("system", "dimension")
    if n < 1:
        raise ConfigError(f"dimension must be >= 1, got {n}", at("system", "dimension"))
    mats = {}
    for key in ("a0", "a1", "a2"):
        m = get("system", key)
        if len(m) != n * n:
            raise ConfigError(f"{key} needs {n * n} entries for dimension {n}, got {len(m)}", at("system", key))
        mats[key] = m
    h1, h2 = get("system", "h1"), get("system", "h2")
    for key, h in (("h1", h1), ("h2", h2)):
        if not h > 0:
            raise ConfigError(f"{key} must be positive, got {h}", at("system", key))
    lam = get("system", "lambda")
    if not 0 < lam < 1:
        raise ConfigError(f"lambda must lie in (0, 1), got {lam}", at("system", "lambda"))

    horizon, step = get("simulation", "horizon"), get("simulation", "step")
    if not horizon > 0:
        raise ConfigError(f"horizon must be positive, got {horizon}", at("simulation", "horizon"))
    if not step > 0:
        raise ConfigError(f"step must be positive, got {step}", at("simulation", "step"))
    try:
        Grid.for_system(step, horizon, DelayPair(h1, h2))
    except DomainError:
        hint = suggest_step(step, DelayPair(h1, h2), horizon)
        raise ConfigError(f"step {step:g} is not commensurate with h1={h1:g}, h2={h2:g} and "
                          f"horizon {horizon:g}; try step = {hint:g}", at("simulation", "step"))

    kind = get("history", "kind")
    if kind not in HISTORY_KINDS:
        raise ConfigError(f"history kind must be one of {', '.join(HISTORY_KINDS)}", at("history", "kind"))
    for key in ("drift", "noise"):
        if get("coefficients", key) not in BUILTIN_TAGS:
            raise ConfigError(f"{key} must be one of {', '.join(BUILTIN_TAGS)}", at("coefficients", key))

    n_paths = get("simulation", "n_paths")
    if n_paths < 1:
        raise ConfigError("n_paths must be >= 1", at("simulation", "n_paths"))
    seed = get("simulation", "seed")
    if not 0 <= seed < 2 ** 64:
        raise ConfigError("seed must be a 64-bit unsigned integer", at("simulation", "seed"))
    p = get("simulation", "p")
    if p < 2:
        raise ConfigError(f"p must be >= 2, got {p}", at("simulation", "p"))
    gamma = get("simulation", "gamma")
    if not gamma > 0:
        raise ConfigError(f"gamma must be positive, got {gamma}", at("simulation", "gamma"))
    q = get("simulation", "q")
    if q is not None and q not in (1, n):
        raise ConfigError(f"q must be 1 or the dimension ({n}), got {q}", at("simulation", "q"))
    epsilon = get("certificate", "epsilon")
    if not epsilon > 0:
        raise ConfigError("epsilon must be positive", at("certificate", "epsilon"))

    def opt(key: str) -> Optional[str]:
        v = str(get("output", key))
        return None if v.lower() in _OFF else v

    out = OutputSpec(
        directory=str(get("output", "directory")),
        moments_csv=str(get("output", "moments_csv")),
        paths_csv=opt("paths_csv"),
        mean_path_csv=opt("mean_path_csv"),
        trajectory_csv=opt("trajectory_csv"),
        certificate=opt("certificate"),
        binary_dump=opt("binary_dump"),
    )
    try:
        TruncationPolicy(get("series", "rel_tol"), get("series", "abs_tol"), get("series", "max_terms"))
    except DomainError as e:
        raise ConfigError(str(e), lines.get("series", 0))

    return ExperimentConfig(
        name=name, text=text, dimension=n,
        a0=mats["a0"], a1=mats["a1"], a2=mats["a2"], h1=h1, h2=h2, lam=lam,
        horizon=horizon, step=step,
        history_kind=kind, history_value=get("history", "value"), history_scale=get("history", "scale"),
        drift=get("coefficients", "drift"), drift_scale=get("coefficients", "drift_scale"),
        noise=get("coefficients", "noise"), noise_scale=get("coefficients", "noise_scale"),
        n_paths=n_paths, seed=seed, p=p, gamma=gamma, q=q,
        magnitude_cap=get("simulation", "magnitude_cap"),
        epsilon=epsilon, cp=get("certificate", "cp"), grid_points=get("certificate", "grid_points"),
        rel_tol=get("series", "rel_tol"), abs_tol=get("series", "abs_tol"),
        max_terms=get("series", "max_terms"),
        output=out,
    )


def load_config(path: Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}")
    return parse_config(text, name=path.stem)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _t(x: float) -> str:
    return repr(round(float(x), 12) + 0.0)


def _write_csv(path: Path, header: Sequence[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)
    return path


def write_moments_csv(path: Path, result: SimulationResult) -> Path:
    est = result.moments
    rows = ((_t(t), repr(float(m)), repr(float(s)), est.n_paths)
            for t, m, s in zip(est.times, est.mean, est.stderr))
    return _write_csv(path, MOMENTS_HEADER, rows)


def read_moments_csv(path: Path) -> Dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != MOMENTS_HEADER:
            raise ConfigError(f"{path}: unexpected header {header}", 1)
        rows = [r for r in reader]
    cols = list(zip(*rows)) if rows else [(), (), (), ()]
    return {
        "t": np.array([float(x) for x in cols[0]]),
        "mean_p_moment": np.array([float(x) for x in cols[1]]),
        "stderr": np.array([float(x) for x in cols[2]]),
        "n_paths": np.array([int(x) for x in cols[3]]),
    }


def write_trajectory_csv(path: Path, times: np.ndarray, values: np.ndarray) -> Path:
    """t, y_1..y_n per row; used for the mean path and deterministic solutions."""
    n = values.shape[1]
    header = ["t"] + [f"y_{i + 1}" for i in range(n)]
    rows = ([_t(t)] + [repr(float(v)) for v in row] for t, row in zip(times, values))
    return _write_csv(path, header, rows)


def read_trajectory_csv(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = [[float(x) for x in r] for r in reader]
    arr = np.array(rows)
    return arr[:, 0], arr[:, 1:]


def write_paths_csv(path: Path, times: np.ndarray, values: np.ndarray) -> Path:
    n = values.shape[2]
    header = ["path_id", "t"] + [f"y_{i + 1}" for i in range(n)]

    def rows():
        for pid in range(values.shape[0]):
            for t, row in zip(times, values[pid]):
                yield [pid, _t(t)] + [repr(float(v)) for v in row]
    return _write_csv(path, header, rows())


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    config_sha256: str
    seed: int
    version: str
    wall_time_s: float
    command: str
    outputs: List[Dict[str, str]] = field(default_factory=list)

    def add(self, path: Path) -> None:
        self.outputs.append({"path": str(path), "sha256": sha256_file(path)})

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, directory: Path) -> Path:
        path = Path(directory) / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path


@dataclass
class RunOutcome:
    directory: Path
    manifest: RunManifest
    simulation: Optional[SimulationResult] = None
    constants: Optional[AssumptionConstants] = None
    certificate: Optional[StabilityCertificate] = None


def check_lambda_window(lam: float, p: float) -> None:
    lo = (p - 1.0) / p
    if not lo < lam < 1.0:
        raise DomainError(f"lambda={lam} is outside ({lo:g}, 1) required for p={p:g}")


def _finish(manifest: RunManifest, start: float, out_dir: Path) -> None:
    manifest.wall_time_s = round(time.perf_counter() - start, 3)
    manifest.write(out_dir)


def run_simulation(cfg: ExperimentConfig, settings: Optional[Settings] = None,
                   out_dir: Optional[Path] = None, threads: Optional[int] = None,
                   chunk_order: Optional[Sequence[int]] = None) -> RunOutcome:
    settings = settings or Settings.from_env()
    start = time.perf_counter()
    out_dir = Path(out_dir) if out_dir else cfg.output_dir(settings)
    out_dir.mkdir(parents=True, exist_ok=True)
    sys_spec = cfg.system()
    pcfg = cfg.path_config(settings, threads)
    kernel = DelayedMittagLeffler(sys_spec.matrices, sys_spec.delays, cfg.policy())
    logger.info(f"🚀 simulate {cfg.name}: n={cfg.dimension} T={cfg.horizon:g} step={cfg.step:g} "
                f"paths={cfg.n_paths} seed={cfg.seed}")
    result = simulate_paths(sys_spec, cfg.history(), cfg.drift_fn(), cfg.noise_fn(), pcfg,
                            kernel=kernel, chunk_order=chunk_order)

    manifest = RunManifest(cfg.sha256, cfg.seed, __version__, 0.0, "simulate")
    manifest.add(write_moments_csv(out_dir / cfg.output.moments_csv, result))
    if cfg.output.mean_path_csv:
        manifest.add(write_trajectory_csv(out_dir / cfg.output.mean_path_csv, result.times, result.mean_path))
    if cfg.output.paths_csv:
        manifest.add(write_paths_csv(out_dir / cfg.output.paths_csv, result.times, result.values))
    if cfg.output.binary_dump:
        manifest.add(write_binary_paths(out_dir / cfg.output.binary_dump, result.values, pcfg.q or 1))
    _finish(manifest, start, out_dir)
    logger.info(f"✅ wrote {len(manifest.outputs)} files to {out_dir}")
    return RunOutcome(out_dir, manifest, simulation=result)


def run_solve(cfg: ExperimentConfig, settings: Optional[Settings] = None,
              out_dir: Optional[Path] = None, rule: str = "trapezoid") -> RunOutcome:
    """Noise-free trajectory by Picard iteration."""
    settings = settings or Settings.from_env()
    start = time.perf_counter()
    out_dir = Path(out_dir) if out_dir else cfg.output_dir(settings)
    out_dir.mkdir(parents=True, exist_ok=True)
    sys_spec = cfg.system()
    traj = picard_solve(sys_spec, cfg.history(), cfg.drift_fn(), cfg.grid(), rule=rule, pol=cfg.policy())
    logger.info(f"✅ picard converged in {traj.iterations} iterations")
    manifest = RunManifest(cfg.sha256, cfg.seed, __version__, 0.0, "solve")
    manifest.add(write_trajectory_csv(out_dir / (cfg.output.trajectory_csv or "trajectory.csv"),
                                      traj.times, traj.values))
    _finish(manifest, start, out_dir)
    return RunOutcome(out_dir, manifest)


def run_certificate(cfg: ExperimentConfig, settings: Optional[Settings] = None,
                    out_dir: Optional[Path] = None, epsilon: Optional[float] = None) -> RunOutcome:
    settings = settings or Settings.from_env()
    start = time.perf_counter()
    check_lambda_window(cfg.lam, cfg.p)
    out_dir = Path(out_dir) if out_dir else cfg.output_dir(settings)
    out_dir.mkdir(parents=True, exist_ok=True)
    sys_spec = cfg.system()
    ac = compute_constants(sys_spec, cfg.history(), cfg.drift_fn(), cfg.noise_fn(), cfg.p,
                           T=cfg.horizon, pol=cfg.policy(), cp=cfg.cp, grid_points=cfg.grid_points)
    eps = cfg.epsilon if epsilon is None else epsilon
    cert = fts_certificate(ac, sys_spec, cfg.p, cfg.horizon, eps)
    manifest = RunManifest(cfg.sha256, cfg.seed, __version__, 0.0, "certify")
    name = cfg.output.certificate or "certificate.txt"
    path = out_dir / name
    path.write_text(cert.to_text())
    manifest.add(path)
    _finish(manifest, start, out_dir)
    return RunOutcome(out_dir, manifest, constants=ac, certificate=cert)


def sweep_gamma(cfg: ExperimentConfig, gammas: Sequence[float],
                constants: Optional[AssumptionConstants] = None) -> List[Tuple[float, float, bool]]:
    """(gamma, K, is_contraction) per gamma."""
    check_lambda_window(cfg.lam, cfg.p)
    for g in gammas:
        if not g > 0:
            raise DomainError(f"gamma must be positive, got {g}")
    ac = constants or compute_constants(cfg.system(), cfg.history(), cfg.drift_fn(), cfg.noise_fn(),
                                        cfg.p, T=cfg.horizon, pol=cfg.policy(), cp=cfg.cp,
                                        grid_points=cfg.grid_points)
    rows = []
    for g in gammas:
        rep = contraction_k(ac, cfg.p, cfg.lam, g, cfg.horizon)
        rows.append((float(g), rep.k_value, rep.is_contraction))
    return rows


def write_sweep_csv(path: Path, rows: Sequence[Tuple[float, float, bool]]) -> Path:
    return _write_csv(Path(path), ["gamma", "K", "is_contraction"],
                      ([repr(g), repr(k), str(ok).lower()] for g, k, ok in rows))


def sweep_csv_text(rows: Sequence[Tuple[float, float, bool]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["gamma", "K", "is_contraction"])
    for g, k, ok in rows:
        w.writerow([repr(g), repr(k), str(ok).lower()])
    return buf.getvalue()


EXAMPLES = ("example1", "example2")
# where a shipped config departs from the equation it reproduces
EXAMPLE_NOTES = {
    "example1": "lambda = 0.51 instead of 0.5: p = 2 needs lambda > 1/2 strictly",
    "example2": ("runs on [0, 2] with lambda = 0.51; the equation is posed on [0, 10] with lambda = 0.5, "
                 "but the certificate majorant overflows at T = 10 and p = 2 needs lambda > 1/2"),
}


def reproduce(name: str, settings: Optional[Settings] = None,
              out_dir: Optional[Path] = None) -> Tuple[RunOutcome, RunOutcome]:
    """Simulate and certify one of the shipped example configs."""
    if name not in EXAMPLES:
        raise ConfigError(f"unknown example {name!r}; expected one of {', '.join(EXAMPLES)}")
    settings = settings or Settings.from_env()
    path = settings.config_dir / f"{name}.cfg"
    if not path.exists():
        raise ConfigError(f"{path} not found (FRACSTAB_CONFIG_DIR={settings.config_dir})")
    cfg = load_config(path)
    target = Path(out_dir) if out_dir else cfg.output_dir(settings)
    sim = run_simulation(cfg, settings, target / "simulation")
    cert = run_certificate(cfg, settings, target / "certificate")
    return sim, cert
