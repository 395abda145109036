"""
fracstab: delayed perturbed Mittag-Leffler matrix functions, Monte-Carlo
simulation of fractional stochastic neutral delay equations, and the
contraction / finite-time-stability certificates that go with them.
"""

import logging
from importlib import metadata

try:
    __version__ = metadata.version("fracstab")
except metadata.PackageNotFoundError:
    __version__ = "0.1.0"

logging.getLogger(__name__).addHandler(logging.NullHandler())

__all__ = ["__version__"]
