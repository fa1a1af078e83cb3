"""Training timestep densities on (0, 1) and the loss weights they induce.

Each density has an exact pdf, cdf and sampler. Drawing ``t`` from a density
``pi`` with the plain rectified-flow loss is equivalent to the weighted loss with
``w_t = t / (1 - t) * pi(t)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .trajectories import norm_cdf

MODE_S_MAX = 2.0 / (math.pi - 2.0)
MODE_S_MIN = -1.0


class ParameterError(ValueError):
    """Density parameters outside their admissible range."""


class DegenerateDensityError(ArithmeticError):
    pass


def _arr(t):
    return np.asarray(t, dtype=np.float64)


def _logit(t):
    return np.log(t) - np.log1p(-t)


def logistic(u):
    return 1.0 / (1.0 + np.exp(-_arr(u)))


# logit-normal ---------------------------------------------------------------


def logit_normal_pdf(t, m: float = 0.0, s: float = 1.0):
    """Logit-normal density; 0 at the endpoints (its limit there)."""
    if s <= 0:
        raise ParameterError(f"logit-normal scale must be positive, got s={s}")
    t = _arr(t)
    out = np.zeros_like(t)
    inside = (t > 0) & (t < 1)
    ti = t[inside]
    z = (_logit(ti) - m) / s
    out[inside] = np.exp(-0.5 * z * z) / (s * math.sqrt(2 * math.pi) * ti * (1 - ti))
    return out if out.ndim else float(out)


def logit_normal_sample(m: float, s: float, rng: np.random.Generator, size=None):
    if s <= 0:
        raise ParameterError(f"logit-normal scale must be positive, got s={s}")
    return logistic(rng.normal(m, s, size=size))


# mode sampler ---------------------------------------------------------------


def _check_mode_s(s: float) -> None:
    if not (MODE_S_MIN <= s <= MODE_S_MAX):
        raise ParameterError(
            f"mode scale s={s} outside the monotonic range [-1, 2/(pi-2)] = [-1, {MODE_S_MAX:.6f}]"
        )


def mode_map(u, s: float):
    """``f_mode(u; s) = 1 - u - s (cos^2(pi u / 2) - 1 + u)``; decreasing from 1 to 0."""
    _check_mode_s(s)
    u = _arr(u)
    return 1.0 - u - s * (np.cos(0.5 * np.pi * u) ** 2 - 1.0 + u)


def _mode_map_prime(u, s: float):
    return -1.0 - s * (1.0 - 0.5 * np.pi * np.sin(np.pi * u))


def mode_inverse(t, s: float, tol: float = 1e-12):
    """Preimage ``u`` with ``f_mode(u; s) = t`` by bisection on [0, 1]."""
    _check_mode_s(s)
    t = np.atleast_1d(_arr(t))
    lo, hi = np.zeros_like(t), np.ones_like(t)
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        # f is decreasing: f(mid) > t means the root lies to the right
        right = mode_map(mid, s) > t
        lo = np.where(right, mid, lo)
        hi = np.where(right, hi, mid)
    return 0.5 * (lo + hi)


def mode_pdf(t, s: float):
    t = _arr(t)
    u = mode_inverse(t, s)
    slope = np.abs(_mode_map_prime(u, s))
    if np.any(slope < 1e-14):
        raise DegenerateDensityError(f"mode density degenerate at s={s}: |f'| vanishes at the preimage")
    out = 1.0 / slope
    return out.reshape(t.shape) if t.ndim else float(out[0])


def mode_cdf(t, s: float):
    t = _arr(t)
    out = 1.0 - mode_inverse(t, s)
    return out.reshape(t.shape) if t.ndim else float(out[0])


# CosMap ----------------------------------------------------------------------


def cosmap_map(u):
    """``t = 1 - 1 / (tan(pi u / 2) + 1)``, the limit 1 at ``u = 1``."""
    u = _arr(u)
    with np.errstate(divide="ignore"):
        t = 1.0 - 1.0 / (np.tan(0.5 * np.pi * u) + 1.0)
    return np.where(u >= 1.0, 1.0, t)


def cosmap_pdf(t):
    t = _arr(t)
    return 2.0 / (np.pi - 2 * np.pi * t + 2 * np.pi * t * t)


def cosmap_cdf(t):
    t = _arr(t)
    return (2.0 / np.pi) * np.arctan2(t, 1.0 - t)


# densities --------------------------------------------------------------------


@dataclass(frozen=True)
class TimestepDensity:
    """Base timestep density; ``label`` matches the rectified-flow variant label."""

    def pdf(self, t):
        raise NotImplementedError

    def cdf(self, t):
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size=None):
        raise NotImplementedError

    def label(self) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class Uniform(TimestepDensity):
    def pdf(self, t):
        t = _arr(t)
        return np.where((t >= 0) & (t <= 1), 1.0, 0.0)

    def cdf(self, t):
        return np.clip(_arr(t), 0.0, 1.0)

    def sample(self, rng, size=None):
        return rng.random(size)

    def label(self) -> str:
        return "rf"


@dataclass(frozen=True)
class LogitNormal(TimestepDensity):
    m: float = 0.0
    s: float = 1.0

    def __post_init__(self):
        if self.s <= 0:
            raise ParameterError(f"logit-normal scale must be positive, got s={self.s}")

    def pdf(self, t):
        return logit_normal_pdf(t, self.m, self.s)

    def cdf(self, t):
        t = np.clip(_arr(t), 1e-300, 1 - 1e-16)
        return norm_cdf((_logit(t) - self.m) / self.s)

    def sample(self, rng, size=None):
        return logit_normal_sample(self.m, self.s, rng, size)

    def label(self) -> str:
        return f"rf/lognorm({self.m:.2f},{self.s:.2f})"


@dataclass(frozen=True)
class Mode(TimestepDensity):
    s: float = 0.0

    def __post_init__(self):
        _check_mode_s(self.s)

    def pdf(self, t):
        return mode_pdf(t, self.s)

    def cdf(self, t):
        return mode_cdf(t, self.s)

    def sample(self, rng, size=None):
        # f_mode is the reflected quantile function, so no rejection step is needed
        return mode_map(rng.random(size), self.s)

    def label(self) -> str:
        return f"rf/mode({self.s:.2f})"


@dataclass(frozen=True)
class CosMap(TimestepDensity):
    def pdf(self, t):
        return cosmap_pdf(t)

    def cdf(self, t):
        return cosmap_cdf(t)

    def sample(self, rng, size=None):
        return cosmap_map(rng.random(size))

    def label(self) -> str:
        return "rf/cosmap"


def induced_weight(density: TimestepDensity, t):
    """RF base weight ``t / (1 - t)`` times the density."""
    t = _arr(t)
    return t / (1.0 - t) * density.pdf(t)
