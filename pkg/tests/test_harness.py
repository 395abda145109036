#!/usr/bin/env python3
"""
Tests for config parsing, output files and run orchestration
"""

import hashlib
import json

import numpy as np
import pytest

from fracstab.errors import ConfigError, DomainError
from fracstab.harness import (
    EXAMPLE_NOTES,
    EXAMPLES,
    MOMENTS_HEADER,
    load_config,
    parse_config,
    read_moments_csv,
    read_trajectory_csv,
    reproduce,
    run_certificate,
    run_simulation,
    run_solve,
    sha256_file,
    sweep_csv_text,
    sweep_gamma,
    write_sweep_csv,
)
from fracstab.settings import Settings
from fracstab.stability import StabilityCertificate
from fracstab.stochastic import read_binary_paths

from tests.conftest import REPO_ROOT, SMALL_CONFIG


@pytest.fixture
def settings(tmp_path):
    return Settings(threads=1, chunk_size=8, output_dir=tmp_path / "out",
                    config_dir=REPO_ROOT / "configs", log_level="WARNING")


@pytest.fixture
def small_cfg(small_config_text):
    return parse_config(small_config_text, name="small")


class TestParseConfig:
    """Config text to ExperimentConfig"""

    def test_small_config(self, small_cfg):
        cfg = small_cfg
        assert cfg.dimension == 2
        assert cfg.matrices().a0.tolist() == [[-1.0, 0.5], [0.0, -1.0]]
        assert (cfg.h1, cfg.h2, cfg.lam) == (0.5, 0.25, 0.8)
        assert cfg.noise_q == 2
        assert cfg.grid().n_steps == 20
        assert cfg.history().sup_norm() == pytest.approx(np.sqrt(2.0))
        assert cfg.output.moments_csv == "moments.csv"
        assert cfg.output.paths_csv is None and cfg.output.binary_dump is None
        assert cfg.sha256 == hashlib.sha256(SMALL_CONFIG.encode()).hexdigest()
        print("✅ config parse test passed")

    def test_inline_comments_and_quotes(self):
        text = SMALL_CONFIG.replace("h1 = 0.5", "h1 = 0.5  # first delay").replace(
            "drift = cos_delay1", 'drift = "cos_delay1"')
        cfg = parse_config(text)
        assert cfg.h1 == 0.5
        assert cfg.drift == "cos_delay1"

    @pytest.mark.parametrize("old,new,line", [
        ("h1 = 0.5", "h1 = abc", 7),
        ("h2 = 0.25\n", "", 2),
        ("a0 = -1 0.5 0 -1", "a0 = -1 0.5 0", 4),
        ("p = 2", "p = 1.5", 26),
        ("seed = 7", "sede = 7", 25),
        ("gamma = 1\n", "gamma = 1\nq = 3\n", 28),
        ("[system]", "[system", 2),
        ("lambda = 0.8", "lambda = 1.2", 9),
        ("drift = cos_delay1", "drift = tanh", 16),
        ("kind = constant", "kind = spline", 12),
    ])
    def test_errors_carry_line_numbers(self, old, new, line):
        with pytest.raises(ConfigError) as exc:
            parse_config(SMALL_CONFIG.replace(old, new))
        assert exc.value.line == line
        assert str(exc.value).startswith(f"line {line}:")

    def test_incommensurate_step_hint(self):
        with pytest.raises(ConfigError) as exc:
            parse_config(SMALL_CONFIG.replace("step = 0.05", "step = 0.03"))
        assert exc.value.line == 23
        assert "try step = 0.0277778" in str(exc.value)
        print("✅ commensurate step hint test passed")

    def test_block_errors(self):
        with pytest.raises(ConfigError) as exc:
            parse_config(SMALL_CONFIG + "[history]\nkind = zero\n")
        assert exc.value.line == 32
        with pytest.raises(ConfigError) as exc:
            parse_config(SMALL_CONFIG + "[physics]\n")
        assert "unknown block" in str(exc.value)
        with pytest.raises(ConfigError) as exc:
            parse_config("x = 1\n" + SMALL_CONFIG)
        assert exc.value.line == 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.cfg")

    def test_shipped_examples_parse(self):
        for name in ("example1", "example2"):
            cfg = load_config(REPO_ROOT / "configs" / f"{name}.cfg")
            assert cfg.name == name
            assert cfg.dimension == 2
            assert cfg.lam == pytest.approx(0.51)
            cfg.grid()

    def test_example_notes_match_shipped_configs(self):
        cfg = load_config(REPO_ROOT / "configs" / "example2.cfg")
        assert cfg.horizon == pytest.approx(2.0)
        assert f"[0, {cfg.horizon:g}]" in EXAMPLE_NOTES["example2"]
        assert f"lambda = {cfg.lam:g}" in EXAMPLE_NOTES["example2"]
        assert set(EXAMPLE_NOTES) <= set(EXAMPLES)


class TestRuns:
    """Simulation, solve and certificate runs"""

    def test_simulation_outputs_and_manifest(self, small_cfg, settings, tmp_path):
        outcome = run_simulation(small_cfg, settings, tmp_path / "sim")
        moments = read_moments_csv(tmp_path / "sim" / "moments.csv")
        est = outcome.simulation.moments
        np.testing.assert_array_equal(moments["mean_p_moment"], est.mean)
        np.testing.assert_array_equal(moments["stderr"], est.stderr)
        assert (moments["n_paths"] == 24).all()
        assert moments["t"][0] == pytest.approx(-0.5)
        times, mean_path = read_trajectory_csv(tmp_path / "sim" / "mean_path.csv")
        np.testing.assert_array_equal(mean_path, outcome.simulation.mean_path)

        manifest = json.loads((tmp_path / "sim" / "manifest.json").read_text())
        assert manifest["config_sha256"] == small_cfg.sha256
        assert manifest["seed"] == 7
        assert manifest["command"] == "simulate"
        for item in manifest["outputs"]:
            assert sha256_file(item["path"]) == item["sha256"]
        print("✅ simulation outputs test passed")

    def test_default_output_directory(self, small_cfg, settings):
        outcome = run_simulation(small_cfg, settings)
        assert outcome.directory == settings.output_dir / "small"
        assert (outcome.directory / "moments.csv").exists()

    def test_byte_stable_across_threads(self, small_cfg, settings, tmp_path):
        one = run_simulation(small_cfg, settings, tmp_path / "a", threads=1)
        three = run_simulation(small_cfg, settings, tmp_path / "b", threads=3, chunk_order=[2, 1, 0])
        assert [o["sha256"] for o in one.manifest.outputs] == [o["sha256"] for o in three.manifest.outputs]

    def test_optional_outputs(self, settings, tmp_path):
        text = SMALL_CONFIG + "\n[output]\npaths_csv = paths.csv\nbinary_dump = paths.bin\nmean_path_csv = off\n"
        cfg = parse_config(text, name="full")
        outcome = run_simulation(cfg, settings, tmp_path / "full")
        assert not (tmp_path / "full" / "mean_path.csv").exists()
        lines = (tmp_path / "full" / "paths.csv").read_text().splitlines()
        assert lines[0] == "path_id,t,y_1,y_2"
        assert len(lines) == 1 + 24 * 31
        values, q = read_binary_paths(tmp_path / "full" / "paths.bin")
        assert q == 2
        np.testing.assert_array_equal(values, outcome.simulation.values)

    def test_zero_noise_moments_match_trajectory(self, settings, tmp_path):
        cfg = parse_config(SMALL_CONFIG.replace("noise = sin_delay2", "noise = zero"))
        sim = run_simulation(cfg, settings, tmp_path / "sim")
        run_solve(cfg, settings, tmp_path / "solve", rule="rectangle")
        moments = read_moments_csv(tmp_path / "sim" / "moments.csv")
        times, traj = read_trajectory_csv(tmp_path / "solve" / "trajectory.csv")
        np.testing.assert_allclose(times, moments["t"], atol=1e-12)
        np.testing.assert_allclose(moments["mean_p_moment"], np.linalg.norm(traj, axis=1) ** 2,
                                   rtol=1e-9, atol=1e-12)
        est = sim.simulation.moments
        assert est.stderr.max() <= 1e-12 * est.mean.max()

    def test_certificate_run(self, small_cfg, settings, tmp_path):
        outcome = run_certificate(small_cfg, settings, tmp_path / "cert")
        text = (tmp_path / "cert" / "certificate.txt").read_text()
        assert text == outcome.certificate.to_text()
        assert StabilityCertificate.from_text(text).verdict == outcome.certificate.verdict
        assert outcome.constants.p == 2.0
        assert outcome.manifest.command == "certify"

    def test_lipschitz_free_config_passes(self, settings, tmp_path):
        text = (SMALL_CONFIG.replace("drift = cos_delay1", "drift = zero")
                .replace("noise = sin_delay2", "noise = zero")
                .replace("kind = constant", "kind = zero"))
        cert = run_certificate(parse_config(text), settings, tmp_path / "cert", epsilon=2.0).certificate
        assert cert.c_const == 0.0 and cert.b_term == 0.0
        assert cert.lambda_threshold == pytest.approx(2.0 / cert.m_tilde)
        assert cert.verdict

    def test_epsilon_picked_from_lambda_estimate_passes(self, small_cfg, settings, tmp_path):
        pilot = run_certificate(small_cfg, settings, tmp_path / "pilot", epsilon=1.0).certificate
        rate = pilot.first_term / 1.0
        assert rate > 0.0
        eps = 10.0 * (pilot.b_term + pilot.phi_gamma + 1.0) / rate
        cert = run_certificate(small_cfg, settings, tmp_path / "cert", epsilon=eps).certificate
        assert cert.verdict, cert.diagnostic
        print("✅ epsilon from Lambda estimate test passed")

    def test_certificate_needs_lambda_window(self, settings, tmp_path):
        cfg = parse_config(SMALL_CONFIG.replace("lambda = 0.8", "lambda = 0.4"))
        with pytest.raises(DomainError):
            run_certificate(cfg, settings, tmp_path / "cert")

    def test_moments_header(self, small_cfg, settings, tmp_path):
        run_simulation(small_cfg, settings, tmp_path / "sim")
        first = (tmp_path / "sim" / "moments.csv").read_text().splitlines()[0]
        assert first.split(",") == MOMENTS_HEADER


class TestSweepGamma:
    def test_k_halves(self, small_cfg, tmp_path):
        rows = sweep_gamma(small_cfg, [1.0, 2.0, 4.0])
        ks = [k for _, k, _ in rows]
        assert ks[1] == pytest.approx(ks[0] / 2.0, rel=1e-14)
        assert ks[2] == pytest.approx(ks[0] / 4.0, rel=1e-14)
        path = write_sweep_csv(tmp_path / "sweep.csv", rows)
        assert path.read_text() == sweep_csv_text(rows)
        assert sweep_csv_text(rows).splitlines()[0] == "gamma,K,is_contraction"

    def test_rejects_nonpositive_gamma(self, small_cfg):
        with pytest.raises(DomainError):
            sweep_gamma(small_cfg, [1.0, 0.0])


class TestReproduce:
    def test_unknown_example(self, settings):
        with pytest.raises(ConfigError):
            reproduce("example3", settings)

    def test_missing_config_dir(self, settings, tmp_path):
        settings.config_dir = tmp_path / "empty"
        with pytest.raises(ConfigError):
            reproduce("example1", settings)
