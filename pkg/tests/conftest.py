"""
pytest configuration and fixtures for fracstab tests
"""

import os
import sys
import pytest
import numpy as np
from pathlib import Path
from unittest.mock import patch

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from fracstab.delayed_ml import DelayPair, MatrixTriple  # noqa: E402

REPO_ROOT = Path(__file__).parent.parent

EXAMPLE_A0 = [[-1.0, 2.0], [0.0, 1.0]]
EXAMPLE_A1 = [[2.0, 4.0], [1.0, 0.0]]
EXAMPLE_A2 = [[3.0, 0.5], [0.0, -2.0]]


@pytest.fixture
def mock_env(tmp_path):
    """Fixture to provide mock environment variables"""
    with patch.dict(os.environ, {
        'FRACSTAB_THREADS': '2',
        'FRACSTAB_CHUNK_SIZE': '16',
        'FRACSTAB_OUTPUT_DIR': str(tmp_path / 'out'),
        'FRACSTAB_CONFIG_DIR': str(REPO_ROOT / 'configs'),
        'FRACSTAB_LOG_LEVEL': 'WARNING',
    }):
        yield


@pytest.fixture
def runner(mock_env):
    """Create a click CLI runner"""
    from click.testing import CliRunner
    return CliRunner()


@pytest.fixture
def example_matrices():
    """A0, A1, A2 of the shipped examples"""
    return MatrixTriple(np.array(EXAMPLE_A0), np.array(EXAMPLE_A1), np.array(EXAMPLE_A2))


@pytest.fixture
def example_delays():
    return DelayPair(1.0, 0.5)


@pytest.fixture
def write_config(tmp_path):
    """Write config text to a file and return its path"""
    def _write(text, name='test.cfg'):
        path = tmp_path / name
        path.write_text(text)
        return path
    return _write


SMALL_CONFIG = """\
# two-dimensional test system
[system]
dimension = 2
a0 = -1 0.5 0 -1
a1 = 0.2 0 0 0.2
a2 = 0 0 0 0
h1 = 0.5
h2 = 0.25
lambda = 0.8

[history]
kind = constant
value = 1

[coefficients]
drift = cos_delay1
drift_scale = 0.5
noise = sin_delay2
noise_scale = 0.2

[simulation]
horizon = 1
step = 0.05
n_paths = 24
seed = 7
p = 2
gamma = 1

[certificate]
epsilon = 1e6
grid_points = 64
"""


@pytest.fixture
def small_config_text():
    """A cheap but complete config: every block present, runs in well under a second"""
    return SMALL_CONFIG
