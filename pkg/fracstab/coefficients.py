"""
Builtin drift, noise and history functions addressable from config files.

Tags:
    zero        0
    cos_delay1  scale * cos(y(t - h1))
    sin_delay2  scale * sin(y(t - h2))
    sin_sum     scale * sin(t + y(t - h1) + y(t - h2))
    cos_sum     scale * cos(t + y(t - h1) + y(t - h2))
    linear      scale * y(t)

All act componentwise. Lipschitz and growth constants are exact for the
componentwise form in the Euclidean norm. sin_sum and cos_sum read two state
arguments, so their moment constant picks up a factor 2^(p-1).
"""

import math
from typing import Callable, Tuple

import numpy as np

from fracstab.detsolve import CoefficientFn, HistoryFn
from fracstab.errors import ConfigError
from fracstab.stochastic import NoiseFn

_Vec = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _tvec(t):
    # time as a trailing column so it broadcasts against (..., n)
    return np.asarray(t, dtype=float)[..., None] if np.ndim(t) else float(t)


def _kernel(tag: str, scale: float) -> Tuple[_Vec, float, bool]:
    """(evaluator, lipschitz, bounded) for a tag."""
    s = float(scale)
    if tag == "zero":
        return (lambda t, y, y1, y2: np.zeros_like(y)), 0.0, True
    if tag == "cos_delay1":
        return (lambda t, y, y1, y2: s * np.cos(y1)), abs(s), True
    if tag == "sin_delay2":
        return (lambda t, y, y1, y2: s * np.sin(y2)), abs(s), True
    if tag == "sin_sum":
        return (lambda t, y, y1, y2: s * np.sin(_tvec(t) + y1 + y2)), abs(s), True
    if tag == "cos_sum":
        return (lambda t, y, y1, y2: s * np.cos(_tvec(t) + y1 + y2)), abs(s), True
    if tag == "linear":
        return (lambda t, y, y1, y2: s * np.asarray(y, dtype=float)), abs(s), False
    raise ConfigError(f"unknown coefficient {tag!r}; expected one of {', '.join(BUILTIN_TAGS)}")


BUILTIN_TAGS = ("zero", "cos_delay1", "sin_delay2", "sin_sum", "cos_sum", "linear")
# state arguments each tag reads
TAG_ARGS = {"zero": 0, "cos_delay1": 1, "sin_delay2": 1, "sin_sum": 2, "cos_sum": 2, "linear": 1}
HISTORY_KINDS = ("zero", "constant", "exp")


def make_drift(tag: str, scale: float = 1.0, n: int = 1) -> CoefficientFn:
    fn, lip, bounded = _kernel(tag, scale)
    growth = abs(scale) * math.sqrt(n) if bounded else abs(scale)
    if tag == "zero":
        growth = 0.0
    return CoefficientFn(fn, lipschitz=lip, growth=growth, name=tag, n_args=TAG_ARGS[tag])


def make_noise(tag: str, scale: float = 1.0, n: int = 1, q: int = 1) -> NoiseFn:
    """Noise from a drift tag: a single column when q == 1, diagonal when q == n."""
    fn, lip, bounded = _kernel(tag, scale)
    growth = 0.0 if tag == "zero" else (abs(scale) * math.sqrt(n) if bounded else abs(scale))
    if q == 1:
        def evaluator(t, y, y1, y2):
            return fn(t, y, y1, y2)[..., None]
    elif q == n:
        eye = np.eye(n)

        def evaluator(t, y, y1, y2):
            return fn(t, y, y1, y2)[..., :, None] * eye
    else:
        raise ConfigError(f"builtin noise supports q = 1 or q = n ({n}), got q={q}")
    return NoiseFn(evaluator, q=q, lipschitz=lip, growth=growth, name=tag, n_args=TAG_ARGS[tag])


def make_history(kind: str, value: float, scale: float, h: float, step: float, n: int) -> HistoryFn:
    """zero, constant (scale * value) or exp (scale * e^t) on [-h, 0]."""
    if kind == "zero":
        return HistoryFn.constant(0.0, h, step, n)
    if kind == "constant":
        return HistoryFn.constant(scale * value, h, step, n)
    if kind == "exp":
        return HistoryFn.from_callable(lambda t: np.full(n, scale * math.exp(t)), h, step, n)
    raise ConfigError(f"unknown history kind {kind!r}; expected one of {', '.join(HISTORY_KINDS)}")