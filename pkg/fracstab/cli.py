#!/usr/bin/env python3
"""
Command line interface.

    fracstab mlf ALPHA BETA Z
    fracstab dml CONFIG --t T [--nu NU]
    fracstab simulate CONFIG
    fracstab solve CONFIG
    fracstab certify CONFIG [--epsilon EPS]
    fracstab verify
    fracstab sweep-gamma CONFIG -g 1 -g 2 -g 4
    fracstab reproduce example1|example2

Exit codes: 0 ok, 1 verification failure, 2 config error, 3 numerical error.
"""

import functools
import logging
import sys
from pathlib import Path

import click
import numpy as np

from fracstab import __version__
from fracstab.delayed_ml import DelayedMittagLeffler
from fracstab.errors import ConfigError, FracStabError
from fracstab.harness import (
    EXAMPLE_NOTES,
    EXAMPLES,
    load_config,
    reproduce,
    run_certificate,
    run_simulation,
    run_solve,
    sweep_csv_text,
    sweep_gamma,
    write_sweep_csv,
)
from fracstab.settings import Settings, load_env_file
from fracstab.specfun import MLParams, ml_series
from fracstab.stability import run_verification_sweep, sweep_table

logger = logging.getLogger(__name__)

EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def _handle_errors(fn):
    """Map library errors onto exit codes."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as e:
            click.echo(f"❌ config error: {e}", err=True)
            sys.exit(EXIT_CONFIG)
        except (FracStabError, OverflowError, ValueError) as e:
            # ValueError also covers numpy and scipy argument errors
            click.echo(f"❌ {type(e).__name__}: {e}", err=True)
            sys.exit(EXIT_NUMERIC)
    return wrapper


def _config(path: str):
    return load_config(Path(path))


@click.group()
@click.version_option(__version__, prog_name="fracstab")
@click.option("--log-level", default=None, help="Override FRACSTAB_LOG_LEVEL.")
@click.option("--threads", type=int, default=None, help="Override FRACSTAB_THREADS.")
@click.pass_context
def cli(ctx, log_level, threads):
    """Delayed Mittag-Leffler functions, Monte-Carlo moments and stability certificates."""
    load_env_file(Path.cwd() / ".env", override=False)
    settings = Settings.from_env()
    if threads:
        settings.threads = max(1, threads)
    level = (log_level or settings.log_level).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT)
    ctx.obj = settings


@cli.command(context_settings={"ignore_unknown_options": True})
@click.argument("alpha", type=float)
@click.argument("beta", type=float)
@click.argument("z", type=float)
@_handle_errors
def mlf(alpha, beta, z):
    """Print E_{alpha,beta}(z) and its truncation bound."""
    res = ml_series(MLParams(alpha, beta), z)
    click.echo(repr(res.value))
    click.echo(f"# bound={res.error_bound:.3e} terms={res.terms}")


@cli.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--t", "t", type=float, required=True, help="Time point.")
@click.option("--nu", type=float, default=1.0, show_default=True)
@_handle_errors
def dml(config, t, nu):
    """Print the delayed ML matrix function of CONFIG's system at time t."""
    cfg = _config(config)
    ev = DelayedMittagLeffler(cfg.matrices(), cfg.delays(), cfg.policy())
    res = ev.evaluate(t, cfg.lam, nu)
    with np.printoptions(precision=12, suppress=False):
        click.echo(np.array2string(res.value))
    maj = ev.majorant().evaluate(t, cfg.lam, nu).value[0, 0] if t >= 0 else 0.0
    click.echo(f"# norm={np.linalg.norm(res.value, 2):.12g} majorant={maj:.12g} "
               f"bound={res.truncation_bound:.3e} terms={res.terms}")


@cli.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.pass_obj
@_handle_errors
def simulate(settings, config, out_dir):
    """Monte-Carlo moments of CONFIG's equation."""
    cfg = _config(config)
    outcome = run_simulation(cfg, settings, out_dir)
    for item in outcome.manifest.outputs:
        click.echo(f"✅ {item['path']}")


@cli.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.option("--rule", type=click.Choice(["trapezoid", "rectangle"]), default="trapezoid", show_default=True)
@click.pass_obj
@_handle_errors
def solve(settings, config, out_dir, rule):
    """Noise-free trajectory of CONFIG's equation."""
    cfg = _config(config)
    outcome = run_solve(cfg, settings, out_dir, rule=rule)
    for item in outcome.manifest.outputs:
        click.echo(f"✅ {item['path']}")


@cli.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--epsilon", type=float, default=None, help="Override [certificate] epsilon.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.pass_obj
@_handle_errors
def certify(settings, config, epsilon, out_dir):
    """Finite-time-stability certificate for CONFIG."""
    cfg = _config(config)
    outcome = run_certificate(cfg, settings, out_dir, epsilon=epsilon)
    cert = outcome.certificate
    click.echo(cert.to_text(), nl=False)
    h = max(cfg.h1, cfg.h2)
    click.echo(f"FTS: {'PASS' if cert.verdict else 'FAIL'} on [-{h:g},{cfg.horizon:g}]")


@cli.command()
@click.option("--p", "ps", type=float, multiple=True, help="Moment orders (default 1, 1.5, 2).")
@click.option("--lam", "lams", type=float, multiple=True, help="Orders lambda (default 0.6, 0.75, 0.9).")
@click.option("--gamma", "gammas", type=float, multiple=True, help="Rates (default 0.5, 1, 5).")
@click.option("--t", "ts", type=float, multiple=True, help="Times (default 0.5, 1, 2).")
@click.option("--extra-lam", type=float, multiple=True, help="Lambdas added to the default set.")
@click.option("--gronwall-trials", type=int, default=100, show_default=True)
@click.option("--jensen-trials", type=int, default=1000, show_default=True)
@click.option("--no-quad", is_flag=True, help="Skip the direct quadrature route.")
@click.option("--seed", type=int, default=0, show_default=True)
def verify(ps, lams, gammas, ts, extra_lam, gronwall_trials, jensen_trials, no_quad, seed):
    """Numerical checks of the main lemma, Gronwall and Jensen inequalities."""
    kwargs = {}
    if ps:
        kwargs["ps"] = ps
    kwargs["lams"] = tuple(lams or (0.6, 0.75, 0.9)) + tuple(extra_lam)
    if gammas:
        kwargs["gammas"] = gammas
    if ts:
        kwargs["ts"] = ts
    try:
        rows = run_verification_sweep(gronwall_trials=gronwall_trials, jensen_trials=jensen_trials,
                                      seed=seed, quad=not no_quad, **kwargs)
    except (FracStabError, OverflowError, ValueError) as e:
        click.echo(f"❌ {type(e).__name__}: {e}", err=True)
        sys.exit(EXIT_NUMERIC)
    click.echo(sweep_table(rows), nl=False)
    failed = [r for r in rows if r.status == "FAIL"]
    skipped = [r for r in rows if r.status.startswith("SKIPPED")]
    if failed:
        click.echo(f"❌ {len(failed)} of {len(rows)} checks failed", err=True)
        sys.exit(EXIT_VERIFY)
    click.echo(f"✅ {len(rows) - len(skipped)} checks passed, {len(skipped)} skipped")


@cli.command("sweep-gamma")
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("-g", "--gamma", "gammas", type=float, multiple=True, required=True)
@click.option("--out", "out_file", type=click.Path(dir_okay=False), default=None)
@_handle_errors
def sweep_gamma_cmd(config, gammas, out_file):
    """Contraction constant K for each gamma."""
    cfg = _config(config)
    rows = sweep_gamma(cfg, gammas)
    if out_file:
        write_sweep_csv(Path(out_file), rows)
    click.echo(sweep_csv_text(rows), nl=False)


@cli.command("reproduce")
@click.argument("name", type=click.Choice(EXAMPLES))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.pass_obj
@_handle_errors
def reproduce_cmd(settings, name, out_dir):
    """Run a shipped example end to end (simulation and certificate)."""
    if name in EXAMPLE_NOTES:
        click.echo(f"⚠️  {name}: {EXAMPLE_NOTES[name]}")
    sim, cert = reproduce(name, settings, out_dir)
    for outcome in (sim, cert):
        for item in outcome.manifest.outputs:
            click.echo(f"✅ {item['path']}")
    verdict = "PASS" if cert.certificate.verdict else "FAIL"
    click.echo(f"FTS: {verdict} ({name})")


def main():
    cli(prog_name="fracstab")


if __name__ == "__main__":
    main()
