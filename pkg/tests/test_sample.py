import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from flowlab import sample as S
from flowlab import train as TR
from flowlab.mmdit import ConditioningInputs
from flowlab.timesamplers import LogitNormal
from flowlab.trajectories import RF, gaussian_marginal_velocity

alphas = st.floats(0.05, 20.0)
times = st.floats(0.0, 1.0)


def test_constant_field_one_step():
    z1 = np.array([[1.0, -2.0]])
    c = np.array([0.5, 3.0])
    assert np.array_equal(S.euler_integrate(lambda z, t: np.broadcast_to(c, z.shape), z1, [1.0, 0.0]), z1 - c)


def test_point_mass_rf_field_is_straight():
    # degenerate Gaussian data at mu: one Euler step from t=1 lands on mu
    mu = 0.7
    field = lambda z, t: gaussian_marginal_velocity(RF(), z, t, mu=mu, sigma=0.0)  # noqa: E731
    z1 = np.linspace(-3, 3, 13)
    z0 = S.euler_integrate(field, z1, [1.0, 0.0])
    assert np.max(np.abs(z0 - mu)) < 1e-6
    z0, traj = S.euler_integrate(field, z1, S.time_grid(50), return_trajectory=True)
    straight = np.abs(z1 - mu)
    lengths = np.abs(np.diff(traj, axis=0)).sum(axis=0)
    assert np.max(np.abs(lengths - straight)) < 1e-3


def test_standard_normal_rf_flow_converges_to_exact_map():
    # for N(0, 1) data the exact flow is z_t = z_1 sqrt((1-t)^2 + t^2), which is curved
    field = lambda z, t: gaussian_marginal_velocity(RF(), z, t)  # noqa: E731
    z1 = np.linspace(-2, 2, 9)
    z0 = S.euler_integrate(field, z1, S.time_grid(4000))
    assert np.max(np.abs(z0 - z1)) < 1e-3
    one = S.euler_integrate(field, z1, [1.0, 0.0])
    assert np.allclose(one, 0.0)


def test_integration_fault_names_step():
    with pytest.raises(S.IntegrationFault, match="step 3"):
        S.euler_integrate(lambda z, t: np.full_like(z, np.inf if t < 0.6 else 1.0), np.zeros(2), S.time_grid(5))


def test_grid_contract():
    g = S.time_grid(10, shift=3.0)
    assert g[0] == 1.0 and g[-1] == 0.0 and np.all(np.diff(g) < 0)
    assert S.SamplerConfig(5, 5.0).setting_id == "s5_g5"
    with pytest.raises(ValueError):
        S.euler_integrate(lambda z, t: z, np.zeros(1), [0.0, 1.0])
    assert S.SAMPLER_SETTINGS == ((50, 1.0), (50, 2.5), (50, 5.0), (5, 5.0), (10, 5.0), (25, 5.0))


def test_cfg_combine():
    assert S.cfg_combine(2.0, 1.0, 5.0) == 6.0
    assert S.cfg_combine(2.0, 1.0, 1.0) == 2.0
    assert S.cfg_combine(2.0, 1.0, 0.0) == 1.0
    with pytest.raises(ValueError):
        S.cfg_combine(np.ones(2), np.ones(3), 2.0)


def test_shift_examples():
    assert S.shift_time(0.5, 1, 4) == pytest.approx(2 / 3)
    assert S.DEFAULT_SHIFT_1024 == 3.0
    t = np.linspace(0, 1, 11)
    assert np.array_equal(S.shift_time(t, 256, 256), t)
    assert S.shift_by_alpha(0.0, 3.0) == 0.0 and S.shift_by_alpha(1.0, 3.0) == 1.0
    with pytest.raises(ValueError):
        S.shift_time(0.5, 0, 4)


@given(alphas)
def test_shift_log_snr_identity(alpha):
    t = np.linspace(0.01, 0.99, 99)
    rf = RF()
    assert np.max(np.abs(rf.lam(S.shift_by_alpha(t, alpha)) - (rf.lam(t) - 2 * math.log(alpha)))) < 1e-9


@given(alphas)
def test_shift_is_monotone_bijection(alpha):
    t = np.linspace(0, 1, 1001)
    s = S.shift_by_alpha(t, alpha)
    assert np.all(np.diff(s) > 0) and s[0] == 0.0 and s[-1] == pytest.approx(1.0, abs=1e-15)


@given(times, st.floats(1, 1e6), st.floats(1, 1e6), st.floats(1, 1e6))
def test_shift_composition_law(t, n, m, k):
    assert S.shift_time(S.shift_time(t, n, m), m, k) == pytest.approx(float(S.shift_time(t, n, k)), abs=1e-12)


@given(st.floats(0.001, 0.999), st.floats(1, 1e5), st.floats(1, 1e5))
def test_sigma_invariance(t, n, m):
    tm = float(S.shift_time(t, n, m))
    if tm >= 1.0:
        return
    assert S.uncertainty_sigma(tm, m) == pytest.approx(float(S.uncertainty_sigma(t, n)), rel=1e-12, abs=1e-12)


def test_uncertainty_sigma_examples():
    assert S.uncertainty_sigma(0.5, 1) == 1.0
    assert S.uncertainty_sigma(0.3, 4 * 256) == pytest.approx(S.uncertainty_sigma(0.3, 256) / 2)
    with pytest.raises(ValueError):
        S.uncertainty_sigma(1.0, 4)
    with pytest.raises(ValueError):
        S.uncertainty_sigma(0.5, 0.5)


def test_shifted_density_pushforward():
    d = S.ShiftedDensity(LogitNormal(0, 1), 3.0)
    val, _ = integrate.quad(lambda t: float(d.pdf(t)), 0, 1, limit=200)
    assert val == pytest.approx(1.0, abs=1e-8)
    x = d.sample(np.random.default_rng(0), 50_000)
    assert stats.kstest(x, d.cdf).statistic < 0.01
    assert d.label() == "rf/lognorm(0.00,1.00)@shift(3)"


def test_path_length_examples():
    traj = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert S.path_length(traj) == 5.0
    assert S.endpoint_distance(traj) == 5.0
    with pytest.raises(ValueError):
        S.path_length(traj[:1])


@given(st.integers(0, 10_000), st.integers(2, 20))
def test_path_length_triangle_inequality(seed, n):
    traj = np.random.default_rng(seed).normal(size=(n, 6, 2))
    assert S.path_length(traj) >= S.endpoint_distance(traj) - 1e-12


@pytest.fixture(scope="module")
def trained():
    ds = TR.make_dataset("gaussmix2d")
    cfg = TR.TrainConfig(steps=300, batch=64, lr=2e-3, warmup=20, val_every=0, seed=1, model=TR.model_config_for(ds, depth=1))
    res = TR.train(cfg)
    return cfg, ds, res.state.ema


def _cond(ds, cfg, n, seed=0):
    labels = np.random.default_rng(seed).integers(0, ds.n_classes, n)
    return ConditioningInputs(ds.captions(labels), np.ones((n, cfg.model.n_encoders), dtype=bool))


@pytest.mark.slow
def test_step_refinement_on_trained_model(trained):
    cfg, ds, ema = trained
    n = 1000
    cond = _cond(ds, cfg, n)
    noise = np.random.default_rng(2).normal(size=(n, 1, 1, 2))
    a = S.sample_variant(cfg.spec, ema, cfg.model, cond, noise, S.SamplerConfig(50))
    b = S.sample_variant(cfg.spec, ema, cfg.model, cond, noise, S.SamplerConfig(5000))
    assert np.max(np.abs(a.mean(axis=0) - b.mean(axis=0))) < 5e-3


def test_zero_conditioning_guidance_equals_unconditional(trained):
    cfg, ds, ema = trained
    null = _cond(ds, cfg, 64).null()
    noise = np.random.default_rng(3).normal(size=(64, 1, 1, 2))
    plain = S.sample_variant(cfg.spec, ema, cfg.model, null, noise, S.SamplerConfig(10, 1.0))
    guided = S.sample_variant(cfg.spec, ema, cfg.model, null, noise, S.SamplerConfig(10, 5.0))
    assert np.array_equal(plain, guided)


def test_sampling_is_deterministic_and_counts_nfe(trained):
    cfg, ds, ema = trained
    cond = _cond(ds, cfg, 32)
    noise = np.random.default_rng(4).normal(size=(32, 1, 1, 2))
    a = S.sample_variant(cfg.spec, ema, cfg.model, cond, noise, S.SamplerConfig(10, 2.5))
    b = S.sample_variant(cfg.spec, ema, cfg.model, cond, noise, S.SamplerConfig(10, 2.5))
    assert np.array_equal(a, b)
    field = S.VariantVelocity(cfg.spec, ema, cfg.model, cond, 2.5)
    S.euler_integrate(field, noise, S.time_grid(10))
    assert field.nfe == 20
