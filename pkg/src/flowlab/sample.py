"""Deterministic ODE sampling: Euler steps, classifier-free guidance, time shifting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .mmdit import ConditioningInputs, ModelConfig, model_forward
from .timesamplers import TimestepDensity
from .trajectories import Kind, Parameterization, to_x0_eps
from .variants import VariantSpec

# 50 steps at guidance 1.0 / 2.5 / 5.0, then 5 / 10 / 25 steps at guidance 5.0
SAMPLER_SETTINGS: tuple[tuple[int, float], ...] = ((50, 1.0), (50, 2.5), (50, 5.0), (5, 5.0), (10, 5.0), (25, 5.0))
DEFAULT_SHIFT_1024 = 3.0


class IntegrationFault(FloatingPointError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    guidance: float = 1.0
    shift: float = 1.0

    def grid(self) -> np.ndarray:
        return time_grid(self.steps, self.shift)

    @property
    def setting_id(self) -> str:
        return f"s{self.steps}_g{self.guidance:g}"


# time shifting ------------------------------------------------------------------


def shift_by_alpha(t, alpha: float):
    """``alpha t / (1 + (alpha - 1) t)``: a monotone bijection of [0, 1] for alpha > 0."""
    t = np.asarray(t, dtype=np.float64)
    if alpha <= 0:
        raise ValueError(f"shift alpha must be positive, got {alpha}")
    return alpha * t / (1.0 + (alpha - 1.0) * t)


def shift_time(t_n, n: float, m: float):
    """Map a timestep at resolution ``n`` pixels to equal uncertainty at ``m`` pixels."""
    if n <= 0 or m <= 0:
        raise ValueError(f"pixel counts must be positive, got n={n}, m={m}")
    return shift_by_alpha(t_n, math.sqrt(m / n))


def uncertainty_sigma(t, n: float):
    """Std of the constant-image estimate: ``t / (1 - t) / sqrt(n)``."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t >= 1) or np.any(t <= 0):
        raise ValueError(f"uncertainty_sigma needs t in (0, 1), got {t}")
    if n < 1:
        raise ValueError(f"pixel count must be >= 1, got {n}")
    return t / (1.0 - t) * math.sqrt(1.0 / n)


def time_grid(steps: int, shift: float = 1.0) -> np.ndarray:
    """Descending grid from 1 to 0, uniform in t and then shifted."""
    if steps < 1:
        raise ValueError("need at least one step")
    g = shift_by_alpha(np.linspace(1.0, 0.0, steps + 1), shift)
    g[0], g[-1] = 1.0, 0.0
    return g


@dataclass(frozen=True)
class ShiftedDensity(TimestepDensity):
    """Pushforward of a timestep density through the shift map.

    If ``T = g(U)`` with ``g(u) = a u / (1 + (a-1) u)`` then
    ``pdf_T(t) = pdf_U(g^{-1}(t)) * a / (a - (a-1) t)^2`` with ``g^{-1}(t) = t / (a - (a-1) t)``.
    """

    base: TimestepDensity = None
    alpha: float = 1.0

    def _inv(self, t):
        a = self.alpha
        return t / (a - (a - 1.0) * t)

    def pdf(self, t):
        t = np.asarray(t, dtype=np.float64)
        a = self.alpha
        return self.base.pdf(self._inv(t)) * a / (a - (a - 1.0) * t) ** 2

    def cdf(self, t):
        return self.base.cdf(self._inv(np.asarray(t, dtype=np.float64)))

    def sample(self, rng, size=None):
        return shift_by_alpha(self.base.sample(rng, size), self.alpha)

    def label(self) -> str:
        return f"{self.base.label()}@shift({self.alpha:g})"


# integration ---------------------------------------------------------------------


def cfg_combine(v_cond, v_uncond, scale: float):
    v_cond, v_uncond = np.asarray(v_cond), np.asarray(v_uncond)
    if v_cond.shape != v_uncond.shape:
        raise ValueError(f"cfg_combine: shapes differ {v_cond.shape} vs {v_uncond.shape}")
    return v_uncond + scale * (v_cond - v_uncond)


def euler_integrate(velocity, z1, grid, return_trajectory: bool = False):
    """Integrate ``dz/dt = velocity(z, t)`` along ``grid`` (descending from 1 to 0)."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or len(grid) < 2 or np.any(np.diff(grid) >= 0):
        raise ValueError("time grid must be strictly decreasing with at least two points")
    z = np.array(z1, dtype=np.float64, copy=True)
    traj = [z.copy()] if return_trajectory else None
    for k in range(len(grid) - 1):
        v = np.asarray(velocity(z, grid[k]))
        z = z + (grid[k + 1] - grid[k]) * v
        if not np.all(np.isfinite(z)):
            raise IntegrationFault(f"non-finite state after Euler step {k} (t={grid[k]:.6g})")
        if return_trajectory:
            traj.append(z.copy())
    if return_trajectory:
        return z, np.stack(traj)
    return z


def path_length(trajectory) -> float:
    """Sum of per-step increment norms; for a batch, the mean over samples."""
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.shape[0] < 2:
        raise ValueError("path_length needs at least two states")
    inc = np.diff(traj, axis=0).reshape(traj.shape[0] - 1, *traj.shape[1:])
    if traj.ndim == 1:
        return float(np.abs(inc).sum())
    if traj.ndim == 2:
        return float(np.linalg.norm(inc, axis=1).sum())
    per = np.sqrt((inc.reshape(inc.shape[0], inc.shape[1], -1) ** 2).sum(axis=-1)).sum(axis=0)
    return float(per.mean())


def endpoint_distance(trajectory) -> float:
    traj = np.asarray(trajectory, dtype=np.float64)
    d = (traj[-1] - traj[0]).reshape(traj.shape[1], -1) if traj.ndim > 2 else (traj[-1] - traj[0]).reshape(1, -1)
    return float(np.sqrt((d**2).sum(axis=-1)).mean())


# trained-model velocity ------------------------------------------------------------

NATIVE_T_MAX = {Kind.COSINE: 1.0 - 1e-3}
RF_COORD_T_MAX = 1.0 - 1e-3


def edm_input_scale(variant: VariantSpec, t):
    """Network input scaling; EDM-form schedules see ``z / sqrt(b^2 + sigma_data^2)``."""
    sched = variant.schedule
    if sched.kind in (Kind.EDM, Kind.MATCHED_EDM):
        b = sched.b(t)
        return 1.0 / np.sqrt(b * b + sched.sigma_data**2)
    return np.ones_like(np.asarray(t, dtype=np.float64))


def detach_params(params: T.Params) -> T.Params:
    return T.Params((k, T.Tensor(v.data)) for k, v in params.items())


class VariantVelocity:
    """Velocity field of a trained variant in its sampling coordinates.

    Variance-preserving and straight-line schedules integrate their own ODE in
    their own time. EDM-form schedules have no finite noise endpoint and are
    integrated in straight-line coordinates: at time ``s`` the state ``z_rf``
    maps to ``z = (a + b) z_rf`` at the schedule time with the same log-SNR,
    and the velocity is ``eps_hat - x0_hat``.
    """

    def __init__(self, variant: VariantSpec, params: T.Params, config: ModelConfig, cond: ConditioningInputs, guidance: float = 1.0):
        self.variant = variant
        self.params = detach_params(params)
        self.config = config
        self.cond = cond
        self.guidance = guidance
        self.rf_coords = variant.schedule.kind in (Kind.EDM, Kind.MATCHED_EDM)
        self.nfe = 0

    def _predict(self, z_in, t, cond):
        self.nfe += 1
        return model_forward(z_in, t, cond, self.params, self.config).data.astype(np.float64)

    def _guided(self, z_in, t):
        b = z_in.shape[0]
        tt = np.full(b, t)
        if self.guidance == 1.0:
            return self._predict(z_in, tt, self.cond)
        pc = self._predict(z_in, tt, self.cond)
        pu = self._predict(z_in, tt, self.cond.null())
        return cfg_combine(pc, pu, self.guidance)

    def __call__(self, z, s):
        sched, param = self.variant.schedule, self.variant.parameterization
        dtype = T.DTYPES[self.config.dtype]
        if not self.rf_coords:
            t = min(s, NATIVE_T_MAX.get(sched.kind, 1.0))
            pred = self._guided(z.astype(dtype), t)
            if param is Parameterization.VELOCITY:
                return pred
            x0, eps = to_x0_eps(pred, param, z, t, sched)
            return sched.da(t) * x0 + sched.db(t) * eps
        s = min(s, RF_COORD_T_MAX)
        lam = 2.0 * (math.log1p(-s) - math.log(s))
        t = float(np.clip(sched.t_from_lambda(lam), 1e-12, 1 - 1e-12))
        zz = (sched.a(t) + sched.b(t)) * z
        pred = self._guided((edm_input_scale(self.variant, t) * zz).astype(dtype), t)
        x0, eps = to_x0_eps(pred, param, zz, t, sched)
        return eps - x0


def sample_variant(
    variant: VariantSpec,
    params: T.Params,
    config: ModelConfig,
    cond: ConditioningInputs,
    noise: np.ndarray,
    sampler: SamplerConfig,
    return_trajectory: bool = False,
):
    field = VariantVelocity(variant, params, config, cond, sampler.guidance)
    return euler_integrate(field, noise, sampler.grid(), return_trajectory)
