"""Forward processes ``z_t = a(t) x0 + b(t) eps`` and their log-SNR algebra.

Four families (rectified flow, EDM, cosine, LDM-linear) plus an EDM-form
schedule whose log-SNR is slaved to another schedule. Functions here are pure
and operate on plain numpy arrays or floats.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

RF_TRAIN_CLAMP = 1e-5


class DomainError(ValueError):
    """Evaluation at a pole or outside a schedule's domain."""


class SingularConversionError(ArithmeticError):
    """A prediction-space conversion has a vanishing Jacobian."""


# standard normal quantile ---------------------------------------------------
#
# Acklam's rational approximation (relative error < 1.15e-9 on (0, 1)) followed
# by one Halley step against erfc, which brings the result to ~1e-15.

_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _acklam(p: np.ndarray) -> np.ndarray:
    x = np.empty_like(p)
    lo = p < _P_LOW
    hi = p > 1 - _P_LOW
    mid = ~(lo | hi)
    if mid.any():
        q = p[mid] - 0.5
        r = q * q
        num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
        den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1
        x[mid] = num / den
    for mask, sign, pp in ((lo, 1.0, p[lo]), (hi, -1.0, 1 - p[hi])):
        if mask.any():
            q = np.sqrt(-2 * np.log(pp))
            num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
            den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1
            x[mask] = sign * num / den
    return x


def norm_ppf(p):
    """Standard normal quantile. ``p`` in [0, 1]; the endpoints map to -inf/+inf."""
    p = np.asarray(p, dtype=np.float64)
    scalar = p.ndim == 0
    p = np.atleast_1d(p)
    out = np.full_like(p, np.nan)
    out[p == 0] = -np.inf
    out[p == 1] = np.inf
    inside = (p > 0) & (p < 1)
    if inside.any():
        pi = p[inside]
        # refine in the lower half only; 1 - p is exact for p >= 1/2
        upper = pi > 0.5
        q = np.where(upper, 1.0 - pi, pi)
        x = _acklam(q)
        e = 0.5 * erfc(-x / math.sqrt(2)) - q
        u = e * math.sqrt(2 * math.pi) * np.exp(x * x / 2)
        x = x - u / (1 + x * u / 2)
        out[inside] = np.where(upper, -x, x)
    return out[0] if scalar else out


def norm_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)


def norm_cdf(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * erfc(-x / math.sqrt(2))


# schedules -----------------------------------------------------------------


class Kind(str, enum.Enum):
    RF = "RF"
    EDM = "EDM"
    COSINE = "Cosine"
    LDM_LINEAR = "LDMLinear"
    MATCHED_EDM = "MatchedEDM"


def _arr(t):
    return np.asarray(t, dtype=np.float64)


@dataclass(frozen=True)
class Schedule:
    """Base class. Subclasses implement ``a, b, da, db`` and the log-SNR inverse."""

    kind = None
    # open endpoints where log-SNR diverges; evaluating lambda there is an error
    poles = ()

    def a(self, t):
        raise NotImplementedError

    def b(self, t):
        raise NotImplementedError

    def da(self, t):
        raise NotImplementedError

    def db(self, t):
        raise NotImplementedError

    def lam(self, t):
        t = _arr(t)
        return 2 * (np.log(self.a(t)) - np.log(self.b(t)))

    def dlam(self, t):
        t = _arr(t)
        return 2 * (self.da(t) / self.a(t) - self.db(t) / self.b(t))

    def t_from_lambda(self, lam):
        """Invert the strictly decreasing log-SNR by bisection (subclasses override)."""
        lam = np.atleast_1d(_arr(lam))
        lo = np.full_like(lam, 1e-12)
        hi = np.full_like(lam, 1 - 1e-12)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            above = self.lam(mid) > lam
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
        return 0.5 * (lo + hi)

    def check_open(self, t) -> None:
        t = _arr(t)
        if np.any((t < 0) | (t > 1)):
            raise DomainError(f"{self.label()}: t must lie in [0, 1], got {t}")
        for pole in self.poles:
            if np.any(t == pole):
                raise DomainError(f"{self.label()}: log-SNR has a pole at t={pole}")

    def label(self) -> str:
        return self.kind.value


@dataclass(frozen=True)
class RF(Schedule):
    kind = Kind.RF
    poles = (0.0, 1.0)

    def a(self, t):
        return 1.0 - _arr(t)

    def b(self, t):
        return _arr(t) * 1.0

    def da(self, t):
        return np.full_like(_arr(t), -1.0)

    def db(self, t):
        return np.full_like(_arr(t), 1.0)

    def dlam(self, t):
        t = _arr(t)
        return -2.0 / (t * (1 - t))

    def t_from_lambda(self, lam):
        return 1.0 / (1.0 + np.exp(_arr(lam) / 2))


@dataclass(frozen=True)
class EDM(Schedule):
    """``a = 1``, ``b = exp(quantile_N(t | P_m, P_s^2))``."""

    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_data: float = 0.5
    kind = Kind.EDM
    poles = (0.0, 1.0)

    def a(self, t):
        return np.ones_like(_arr(t))

    def b(self, t):
        return np.exp(self.p_mean + self.p_std * norm_ppf(_arr(t)))

    def da(self, t):
        return np.zeros_like(_arr(t))

    def db(self, t):
        q = norm_ppf(_arr(t))
        return np.exp(self.p_mean + self.p_std * q) * self.p_std / norm_pdf(q)

    def lam(self, t):
        return -2.0 * (self.p_mean + self.p_std * norm_ppf(_arr(t)))

    def dlam(self, t):
        return -2.0 * self.p_std / norm_pdf(norm_ppf(_arr(t)))

    def t_from_lambda(self, lam):
        return norm_cdf((-_arr(lam) / 2 - self.p_mean) / self.p_std)

    def label(self) -> str:
        return f"EDM({self.p_mean:g},{self.p_std:g})"


@dataclass(frozen=True)
class Cosine(Schedule):
    kind = Kind.COSINE
    poles = (0.0, 1.0)

    def a(self, t):
        t = _arr(t)
        return np.where(t == 1.0, 0.0, np.cos(0.5 * np.pi * t))

    def b(self, t):
        return np.sin(0.5 * np.pi * _arr(t))

    def da(self, t):
        return -0.5 * np.pi * np.sin(0.5 * np.pi * _arr(t))

    def db(self, t):
        return 0.5 * np.pi * np.cos(0.5 * np.pi * _arr(t))

    def dlam(self, t):
        return -2.0 * np.pi / np.sin(np.pi * _arr(t))

    def t_from_lambda(self, lam):
        return (2.0 / np.pi) * np.arctan(np.exp(-_arr(lam) / 2))


@dataclass(frozen=True)
class LdmTable:
    """Discrete variance-preserving coefficients for indices ``0..T-1``."""

    betas: np.ndarray
    alphas: np.ndarray  # a_t = sqrt(prod_{s<=t} (1 - beta_s))

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def sigmas(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alphas**2)

    def index(self, t):
        """Continuous t -> table index ``round(t (T-1))`` with ties resolved downward."""
        x = _arr(t) * (self.T - 1)
        return np.ceil(x - 0.5).astype(int)

    def at(self, t):
        i = self.index(t)
        return self.alphas[i], self.sigmas[i]


def ldm_linear_coeffs(beta0: float, betaT: float, T: int, variant: str = "LDM") -> LdmTable:
    """Cumulative VP coefficients with linear (DDPM) or sqrt-linear (LDM) betas."""
    if not (0 < beta0 < 1 and 0 < betaT < 1):
        raise DomainError(f"betas must lie in (0, 1), got beta0={beta0}, betaT={betaT}")
    if beta0 > betaT:
        raise DomainError(f"beta0={beta0} exceeds betaT={betaT}")
    if T < 2:
        raise DomainError(f"need T >= 2 timesteps, got {T}")
    frac = np.arange(T) / (T - 1)
    if variant == "DDPM":
        betas = beta0 + frac * (betaT - beta0)
    elif variant == "LDM":
        betas = (math.sqrt(beta0) + frac * (math.sqrt(betaT) - math.sqrt(beta0))) ** 2
    else:
        raise ValueError(f"unknown LDM-linear variant {variant!r}")
    alphas = np.sqrt(np.cumprod(1.0 - betas))
    return LdmTable(betas=betas, alphas=alphas)


@dataclass(frozen=True)
class LDMLinear(Schedule):
    """Continuous-time access to the discrete LDM table.

    ``log a^2`` is interpolated linearly between the knots ``k/(T-1)``, so the
    schedule reproduces the table exactly at the knots and has piecewise
    constant derivatives between them.
    """

    beta0: float = 0.00085
    betaT: float = 0.012
    T: int = 1000
    variant: str = "LDM"
    kind = Kind.LDM_LINEAR

    def __post_init__(self):
        table = ldm_linear_coeffs(self.beta0, self.betaT, self.T, self.variant)
        object.__setattr__(self, "_table", table)
        object.__setattr__(self, "_log_a2", 2 * np.log(table.alphas))

    @property
    def table(self) -> LdmTable:
        return self._table

    def _segment(self, t):
        x = np.clip(_arr(t), 0.0, 1.0) * (self.T - 1)
        k = np.minimum(np.floor(x).astype(int), self.T - 2)
        return k, x - k

    def _L(self, t):
        k, f = self._segment(t)
        return (1 - f) * self._log_a2[k] + f * self._log_a2[k + 1]

    def _dL(self, t):
        k, _ = self._segment(t)
        return (self._log_a2[k + 1] - self._log_a2[k]) * (self.T - 1)

    def a(self, t):
        return np.exp(0.5 * self._L(t))

    def b(self, t):
        return np.sqrt(-np.expm1(self._L(t)))

    def da(self, t):
        return 0.5 * self.a(t) * self._dL(t)

    def db(self, t):
        L = self._L(t)
        return -np.exp(L) * self._dL(t) / (2 * np.sqrt(-np.expm1(L)))

    def lam(self, t):
        L = self._L(t)
        return L - np.log(-np.expm1(L))

    def dlam(self, t):
        L = self._L(t)
        return self._dL(t) / (-np.expm1(L))

    def label(self) -> str:
        return f"LDMLinear({self.variant},{self.beta0:g},{self.betaT:g},{self.T})"


@dataclass(frozen=True)
class MatchedEDM(Schedule):
    """EDM-form schedule (``a = 1``) sharing the log-SNR of ``target`` at every t."""

    target: Schedule = field(default_factory=RF)
    sigma_data: float = 0.5
    kind = Kind.MATCHED_EDM

    @property
    def poles(self):  # type: ignore[override]
        return self.target.poles

    def a(self, t):
        return np.ones_like(_arr(t))

    def b(self, t):
        return np.exp(-0.5 * self.target.lam(t))

    def da(self, t):
        return np.zeros_like(_arr(t))

    def db(self, t):
        return -0.5 * self.b(t) * self.target.dlam(t)

    def lam(self, t):
        return self.target.lam(t)

    def dlam(self, t):
        return self.target.dlam(t)

    def t_from_lambda(self, lam):
        return self.target.t_from_lambda(lam)

    def label(self) -> str:
        return f"MatchedEDM({self.target.label()})"


def matched_edm_schedule(target: Schedule) -> MatchedEDM:
    return MatchedEDM(target=target)


# operations ----------------------------------------------------------------


@dataclass(frozen=True)
class SnrPoint:
    t: float
    lam: float
    lam_prime: float


def forward_sample(schedule: Schedule, x0, eps, t):
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"forward_sample: x0 shape {x0.shape} != eps shape {eps.shape}")
    t = _arr(t)
    if np.any((t < 0) | (t > 1)):
        raise DomainError(f"t must lie in [0, 1], got {t}")
    t = _bcast_time(t, x0)
    return schedule.a(t) * x0 + schedule.b(t) * eps


def _bcast_time(t, like: np.ndarray):
    """Per-sample times of shape (B,) broadcast against (B, ...)."""
    t = _arr(t)
    if t.ndim == 1 and like.ndim > 1 and t.shape[0] == like.shape[0]:
        return t.reshape((-1,) + (1,) * (like.ndim - 1))
    return t


def snr_eval(schedule: Schedule, t: float) -> SnrPoint:
    schedule.check_open(t)
    lam, dlam = float(schedule.lam(t)), float(schedule.dlam(t))
    if not (math.isfinite(lam) and math.isfinite(dlam)):
        raise DomainError(f"{schedule.label()}: log-SNR not finite at t={t}")
    return SnrPoint(t=float(t), lam=lam, lam_prime=dlam)


def conditional_velocity(schedule: Schedule, z, eps, t):
    """``u_t(z | eps) = (a'/a) z - (b/2) lambda' eps``."""
    schedule.check_open(t)
    z, eps = np.asarray(z, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    tt = _bcast_time(t, z)
    a = schedule.a(tt)
    if np.any(a == 0):
        raise DomainError(f"{schedule.label()}: a'/a has a pole at t={t}")
    return schedule.da(tt) / a * z - 0.5 * schedule.b(tt) * schedule.dlam(tt) * eps


def gaussian_marginal_velocity(schedule: Schedule, z, t, mu: float = 0.0, sigma: float = 1.0):
    """Closed-form marginal field for 1D data ``x0 ~ N(mu, sigma^2)``.

    ``u_t(z) = a' E[x0 | z] + b' E[eps | z]`` with Gaussian posterior means.
    ``sigma = 0`` gives point-mass data.
    """
    z, t = np.asarray(z, dtype=np.float64), _arr(t)
    a, b = schedule.a(t), schedule.b(t)
    var = a * a * sigma * sigma + b * b
    r = z - a * mu
    return schedule.da(t) * (mu + a * sigma * sigma * r / var) + schedule.db(t) * b * r / var


def marginal_velocity_mc(schedule: Schedule, z: float, t: float, eps, mu: float = 0.0, sigma: float = 1.0):
    """Monte-Carlo marginal field ``E_eps[u_t(z|eps) p_t(z|eps) / p_t(z)]`` for 1D Gaussian data.

    Returns ``(estimate, standard error)`` over the supplied ``eps`` draws.
    """
    schedule.check_open(t)
    if sigma <= 0:
        raise DomainError("the Monte-Carlo estimator needs sigma > 0")
    eps = np.asarray(eps, dtype=np.float64).reshape(-1)
    a, b, da, db = (float(f(t)) for f in (schedule.a, schedule.b, schedule.da, schedule.db))
    s_cond, s_marg = a * sigma, math.sqrt(a * a * sigma * sigma + b * b)
    x0 = (z - b * eps) / a
    u = da * x0 + db * eps
    ratio = norm_pdf((z - a * mu - b * eps) / s_cond) / s_cond / (norm_pdf((z - a * mu) / s_marg) / s_marg)
    terms = u * ratio
    return float(terms.mean()), float(terms.std(ddof=1) / math.sqrt(len(terms)))


class Parameterization(str, enum.Enum):
    VELOCITY = "Velocity"
    EPS = "EpsPrediction"
    V = "VPrediction"
    F = "FPrediction"


def _edm_precond(schedule: Schedule, t, sigma_data: float = 0.5):
    """VE-frame quantities: sigma = b/a, skip/out scalings of the F-parameterisation."""
    a, b = schedule.a(t), schedule.b(t)
    sigma = b / a
    c_skip = sigma_data**2 / (sigma**2 + sigma_data**2)
    c_out = sigma * sigma_data / np.sqrt(sigma**2 + sigma_data**2)
    return a, b, c_skip, c_out


def to_x0_eps(value, param: Parameterization, z, t, schedule: Schedule):
    """Recover ``(x0, eps)`` implied by a prediction in ``param`` at ``(z, t)``."""
    value, z = np.asarray(value, dtype=np.float64), np.asarray(z, dtype=np.float64)
    t = _bcast_time(t, z)
    a, b = schedule.a(t), schedule.b(t)
    if param is Parameterization.EPS:
        if np.any(a == 0):
            raise SingularConversionError("eps -> x0 needs a(t) != 0")
        return (z - b * value) / a, value
    if param is Parameterization.VELOCITY and schedule.kind is Kind.RF:
        # z = (1 - t) x0 + t eps and v = eps - x0 invert without rounding through lambda'
        return z - t * value, z + (1.0 - t) * value
    if param is Parameterization.VELOCITY:
        dlam = schedule.dlam(t)
        if np.any(dlam * b == 0):
            raise SingularConversionError("velocity -> eps needs lambda' b != 0")
        eps = -2.0 / (dlam * b) * (value - schedule.da(t) / a * z)
        return (z - b * eps) / a, eps
    if param is Parameterization.V:
        n = np.sqrt(a * a + b * b)
        return (a * z - b * n * value) / n**2, (b * z + a * n * value) / n**2
    if param is Parameterization.F:
        sigma_data = getattr(schedule, "sigma_data", 0.5)
        a, b, c_skip, c_out = _edm_precond(schedule, t, sigma_data)
        if np.any(b == 0):
            raise SingularConversionError("F -> eps needs b(t) != 0")
        x0 = c_skip * z / a + c_out * value
        return x0, (z - a * x0) / b
    raise ValueError(f"unknown parameterization {param!r}")


def from_x0_eps(x0, eps, param: Parameterization, z, t, schedule: Schedule):
    """Express a ``(x0, eps)`` pair in ``param`` space."""
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    t = _bcast_time(t, x0)
    a, b = schedule.a(t), schedule.b(t)
    if param is Parameterization.EPS:
        return eps
    if param is Parameterization.VELOCITY:
        return schedule.da(t) * x0 + schedule.db(t) * eps
    if param is Parameterization.V:
        return (a * eps - b * x0) / np.sqrt(a * a + b * b)
    if param is Parameterization.F:
        sigma_data = getattr(schedule, "sigma_data", 0.5)
        a, b, c_skip, c_out = _edm_precond(schedule, t, sigma_data)
        return (x0 - c_skip * np.asarray(z) / a) / c_out
    raise ValueError(f"unknown parameterization {param!r}")


def convert_prediction(value, src: Parameterization, dst: Parameterization, z, t, schedule: Schedule):
    if src == dst:
        raise ValueError("convert_prediction: source and target parameterization are identical")
    schedule.check_open(t)
    x0, eps = to_x0_eps(value, src, z, t, schedule)
    return from_x0_eps(x0, eps, dst, z, t, schedule)


# loss weightings -----------------------------------------------------------


class Weighting(str, enum.Enum):
    CFM = "cfm"
    RF = "rf"
    EDM = "edm"
    COSINE_EPS = "cosine-eps"
    COSINE_V = "cosine-v"
    DENSITY = "density"
    # unweighted regression in eps / v / F space, expressed in the unified form
    EPS_MSE = "eps-mse"
    V_MSE = "v-mse"
    F_MSE = "f-mse"


@dataclass(frozen=True)
class WeightingSpec:
    kind: Weighting
    density: object | None = None  # a TimestepDensity for Weighting.DENSITY
    p_mean: float | None = None  # EDM weighting without an EDM schedule at hand
    p_std: float | None = None


def loss_weight(spec: WeightingSpec, schedule: Schedule, t):
    """Weight ``w_t`` of the unified objective for one of the known formulations."""
    t = _arr(t)
    if np.any((t <= 0) | (t >= 1)):
        raise DomainError(f"loss_weight: t must lie in (0, 1), got {t}")
    kind = spec.kind
    if kind is Weighting.RF:
        return t / (1 - t)
    if kind is Weighting.CFM:
        return -0.5 * schedule.dlam(t) * schedule.b(t) ** 2
    if kind is Weighting.COSINE_EPS:
        return 1.0 / np.cosh(schedule.lam(t) / 2)
    if kind is Weighting.COSINE_V:
        return np.exp(-schedule.lam(t) / 2)
    if kind is Weighting.EDM:
        pm = spec.p_mean if spec.p_mean is not None else getattr(schedule, "p_mean", None)
        ps = spec.p_std if spec.p_std is not None else getattr(schedule, "p_std", None)
        if pm is None or ps is None:
            raise ValueError("EDM weighting needs P_m and P_s")
        lam = schedule.lam(t)
        mu, sd = -2.0 * pm, 2.0 * ps
        dens = np.exp(-0.5 * ((lam - mu) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))
        return dens * (np.exp(-lam) + 0.5**2)
    if kind is Weighting.DENSITY:
        if spec.density is None:
            raise ValueError("density-induced weighting needs a density")
        return t / (1 - t) * spec.density.pdf(t)
    if kind in (Weighting.EPS_MSE, Weighting.V_MSE, Weighting.F_MSE):
        # ||P_hat - P||^2 = J(t) ||eps_hat - eps||^2, and -w lambda' / 2 = J
        a, b = schedule.a(t), schedule.b(t)
        if kind is Weighting.EPS_MSE:
            jac = 1.0
        elif kind is Weighting.V_MSE:
            jac = (a * a + b * b) / (a * a)
        else:
            sd2 = getattr(schedule, "sigma_data", 0.5) ** 2
            jac = (b * b / (a * a) + sd2) / sd2
        return -2.0 * jac / schedule.dlam(t)
    raise ValueError(f"unknown weighting {kind!r}")
