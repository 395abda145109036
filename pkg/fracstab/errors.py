"""
Exception hierarchy for fracstab.

Every error raised on purpose by the library derives from FracStabError so the
CLI can map failures onto exit codes (2 for configuration, 3 for numerics).
"""

from typing import Optional


class FracStabError(Exception):
    """Base class for all fracstab errors."""


class PoleError(FracStabError, ValueError):
    """Gamma function evaluated at a nonpositive integer."""


class DomainError(FracStabError, ValueError):
    """Argument outside the documented domain of an operation."""


class DimensionMismatch(FracStabError, ValueError):
    """Matrices or vectors with incompatible shapes."""


class NonConvergence(FracStabError):
    """A series did not reach its tolerance within the term budget."""

    def __init__(self, message: str, terms: int = 0, reason: str = "max_terms"):
        super().__init__(message)
        self.terms = terms
        self.reason = reason


class NoConvergence(FracStabError):
    """Picard iteration exhausted max_iter."""

    def __init__(self, message: str, iterations: int, last_ratio: Optional[float]):
        super().__init__(message)
        self.iterations = iterations
        self.last_ratio = last_ratio


class PathExplosion(FracStabError):
    """A sample path exceeded the magnitude cap or stopped being finite."""

    def __init__(self, path_id: int, time: float, magnitude: float, cap: float):
        super().__init__(
            f"path {path_id} reached |y|={magnitude:.3e} at t={time:.6g} (cap {cap:.1e})"
        )
        self.path_id = path_id
        self.time = time
        self.magnitude = magnitude
        self.cap = cap


class ConfigError(FracStabError):
    """Malformed experiment configuration, with the offending line."""

    def __init__(self, message: str, line: int = 0):
        self.line = line
        self.message = message
        super().__init__(f"line {line}: {message}")


class GridWarning(UserWarning):
    """A grid maximum moved under local refinement; a finer grid is advised."""
