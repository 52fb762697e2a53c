import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.stats import norm

from convexsde import coefficients as co
from convexsde import euler as eu

ZERO = co.ConstantField(0.0)


def spec(drift=ZERO, diffusion=co.ConstantField(1.0), T=1.0, x0=0.0):
    return co.SdeSpec(drift, diffusion, T, co.Dirac(x0))


# ---------------------------------------------------------------- truncation and one step

def test_draw_truncated():
    assert eu.draw_truncated(0.7, 5) == 0.7
    assert eu.draw_truncated(-6.1, 5) == 0.0
    for g in (-40.0, -1.0, 0.0, 3.3, 1e9):
        assert eu.draw_truncated(g, math.inf) == g


@pytest.mark.parametrize("variant", [eu.TIME_INTEGRATED, eu.POINT_FROZEN])
def test_step_unit_diffusion(variant):
    cfg = eu.SchemeConfig(4, variant, math.inf, 1.0)
    assert eu.step(0.0, 0, spec(), cfg, 1.0) == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize("variant", [eu.TIME_INTEGRATED, eu.POINT_FROZEN])
def test_step_deterministic_decay(variant):
    sp = spec(drift=co.AffineField.from_params([0.0, -1.0]), diffusion=ZERO)
    cfg = eu.SchemeConfig(10, variant, math.inf, 1.0)
    assert eu.step(1.0, 0, sp, cfg, 0.37) == pytest.approx(0.9, abs=1e-15)


def test_time_integrated_uses_time_average():
    # drift 1 on [0, 0.05) and 3 afterwards: the first step of length 0.1 averages to 2
    sp = spec(drift=co.AffineField.from_params([1.0, 0.0, 0.05, 3.0, 0.0]), diffusion=ZERO)
    ti = eu.step(0.0, 0, sp, eu.SchemeConfig(10, eu.TIME_INTEGRATED, math.inf, 1.0), 0.0)
    pf = eu.step(0.0, 0, sp, eu.SchemeConfig(10, eu.POINT_FROZEN, math.inf, 1.0), 0.0)
    assert ti == pytest.approx(0.2, abs=1e-15)
    assert pf == pytest.approx(0.1, abs=1e-15)


def test_rms_diffusion_matches_quadrature():
    # sigma(t, x) = (1 + 2x) until 0.3, then 0.5; rms over [0.2, 0.4] at x = 1
    f = co.AffineField.from_params([1.0, 2.0, 0.3, 0.5, 0.0])
    got = f.step_rms(0.2, 0.4, np.array([1.0]))[0]
    val, _ = integrate.quad(lambda t: (3.0 if t < 0.3 else 0.5) ** 2, 0.2, 0.4, points=[0.3])
    assert got == pytest.approx(math.sqrt(val / 0.2), rel=1e-12)


# ---------------------------------------------------------------- noise

def test_noise_is_a_function_of_seed_path_step():
    a = eu.NoisePanel(10000, 7, seed=3)
    b = eu.NoisePanel(5000, 7, seed=3)
    assert np.array_equal(a.step_major(4090, 4100), b.step_major(4090, 4100))
    assert np.array_equal(a.values()[:5000], b.values())
    c = eu.NoisePanel(100, 7, seed=4)
    assert not np.array_equal(a.step_major(0, 100), c.step_major(0, 100))


def test_audit_twin_is_independent():
    a = eu.NoisePanel(200, 3, seed=1)
    assert not np.array_equal(a.step_major(0, 200), a.audit_twin().step_major(0, 200))


# ---------------------------------------------------------------- simulation

def test_zero_coefficients_constant_paths():
    sp = spec(diffusion=ZERO, x0=3.0)
    cfg = eu.SchemeConfig(8, eu.TIME_INTEGRATED, 5.0, 1.0)
    p = eu.simulate_batch(sp, cfg, eu.NoisePanel(100, 8, 0))
    assert np.all(p.values == 3.0)


def test_infinite_threshold_is_untruncated_scheme():
    sp = spec(drift=co.AffineField.from_params([0.1, -0.3]), diffusion=co.HyperbolaField(0.4), x0=0.5)
    noise = eu.NoisePanel(500, 16, 2)
    p = eu.simulate_batch(sp, eu.SchemeConfig(16, eu.POINT_FROZEN, math.inf, 1.0), noise)
    G = noise.values()
    h = 1.0 / 16
    x = np.full(500, 0.5)
    for k in range(16):
        x = x + h * (0.1 - 0.3 * x) + math.sqrt(h) * 0.4 * np.sqrt(1 + x * x) * G[:, k]
    assert np.array_equal(p.terminal, x)


def test_truncation_consistency():
    sp = spec(diffusion=co.HyperbolaField(0.3))
    noise = eu.NoisePanel(300, 10, 5)
    gmax = np.abs(noise.values()).max()
    a = eu.simulate_batch(sp, eu.SchemeConfig(10, eu.TIME_INTEGRATED, gmax, 1.0), noise)
    b = eu.simulate_batch(sp, eu.SchemeConfig(10, eu.TIME_INTEGRATED, gmax + 10, 1.0), noise)
    c = eu.simulate_batch(sp, eu.SchemeConfig(10, eu.TIME_INTEGRATED, math.inf, 1.0), noise)
    assert np.array_equal(a.values, b.values) and np.array_equal(b.values, c.values)


def test_variants_agree_for_time_constant_fields():
    sp = spec(drift=co.AffineField.from_params([0.2, -0.1]), diffusion=co.SmoothedCEVField(0.3, 0.2, 0.7), x0=1.0)
    noise = eu.NoisePanel(1000, 12, 9)
    a = eu.simulate_batch(sp, eu.SchemeConfig(12, eu.TIME_INTEGRATED, 3.0, 1.0), noise)
    b = eu.simulate_batch(sp, eu.SchemeConfig(12, eu.POINT_FROZEN, 3.0, 1.0), noise)
    assert np.array_equal(a.values, b.values)


def test_determinism_across_threads():
    sp = spec(diffusion=co.HyperbolaField(0.3))
    noise = eu.NoisePanel(40000, 8, 11)
    cfg = eu.SchemeConfig(8, eu.TIME_INTEGRATED, 4.0, 1.0)
    a = eu.simulate_batch(sp, cfg, noise, threads=1)
    b = eu.simulate_batch(sp, cfg, noise, threads=4)
    assert np.array_equal(a.values, b.values)


@pytest.mark.slow
def test_variance_of_truncated_sum():
    m, s, N = 8, 1.5, 1_000_000
    p = eu.simulate_batch(spec(), eu.SchemeConfig(m, eu.TIME_INTEGRATED, s, 1.0), eu.NoisePanel(N, m, 21))
    # independent oracle for E[(Z^s)^2]: numerical integral of z^2 phi(z) over [-s, s]
    ez2, _ = integrate.quad(lambda z: z * z * norm.pdf(z), -s, s)
    y = p.terminal
    var_hat = y.var(ddof=1)
    se = math.sqrt((np.mean((y - y.mean()) ** 4) - var_hat**2) / N)
    assert abs(var_hat - ez2) <= 3 * se


@pytest.mark.slow
def test_gbm_martingale():
    theta, m, N = 0.2, 256, 200_000
    s = math.sqrt(m) / (2 * theta)
    sp = spec(diffusion=co.ProportionalField(theta), x0=1.0)
    p = eu.simulate_batch(sp, eu.SchemeConfig(m, eu.TIME_INTEGRATED, s, 1.0), eu.NoisePanel(N, m, 4))
    y = p.terminal
    assert abs(y.mean() - 1.0) <= 3 * y.std(ddof=1) / math.sqrt(N)


def test_coupled_panels():
    X = spec(diffusion=co.ConstantField(0.2))
    Y = spec(diffusion=co.ConstantField(0.3))
    noise = eu.NoisePanel(2000, 16, 3)
    cfg = eu.SchemeConfig(16, eu.TIME_INTEGRATED, 5.0, 1.0)
    px, py = eu.simulate_coupled(X, Y, cfg, noise)
    assert np.all(np.abs(py.terminal) - np.abs(px.terminal) >= 0)
    same_x, same_y = eu.simulate_coupled(X, X, cfg, noise)
    assert np.array_equal(same_x.values, same_y.values)
    H = spec(diffusion=co.HyperbolaField(0.2)), spec(diffusion=co.HyperbolaField(0.3))
    a, b = eu.simulate_coupled(*H, cfg, noise)
    assert a.values.shape == b.values.shape == (2000, 17)


def test_horizon_mismatch():
    with pytest.raises(ValueError):
        eu.simulate_coupled(spec(T=1.0), spec(T=2.0), eu.SchemeConfig(4, eu.TIME_INTEGRATED, 5.0, 1.0),
                            eu.NoisePanel(10, 4, 0))
    with pytest.raises(ValueError):
        eu.simulate_batch(spec(), eu.SchemeConfig(4, eu.TIME_INTEGRATED, 5.0, 1.0), eu.NoisePanel(10, 5, 0))


def test_comonotone_initial_coupling():
    X = co.SdeSpec(ZERO, ZERO, 1.0, co.TwoPoint(-1.0, 1.0, 0.5))
    Y = co.SdeSpec(ZERO, ZERO, 1.0, co.TwoPoint(-2.0, 2.0, 0.5))
    cfg = eu.SchemeConfig(2, eu.TIME_INTEGRATED, 5.0, 1.0)
    px, py = eu.simulate_coupled(X, Y, cfg, eu.NoisePanel(1000, 2, 0))
    assert np.array_equal(2 * px.values[:, 0], py.values[:, 0])


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(0, 3), st.floats(-1, 1))
def test_one_step_map_is_monotone_under_step_bound(x, gap, u):
    sig = co.HyperbolaField(0.5)
    drift = co.AffineField.from_params([0.0, -0.8])
    m, T = 64, 1.0
    h = T / m
    s = 1 / (2 * sig.lip_exact * math.sqrt(h))
    assert h <= 1 / (2 * 0.8)
    z = u * s
    sp = co.SdeSpec(drift, sig, T, co.Dirac(0.0))
    cfg = eu.SchemeConfig(m, eu.TIME_INTEGRATED, s, T)
    assert eu.step(x, 3, sp, cfg, z) <= eu.step(x + gap, 3, sp, cfg, z) + 1e-12


# ---------------------------------------------------------------- interpolation, serialisation, exact GBM

def test_interpolate():
    assert eu.interpolate([0.0, 1.0, 0.0], 1.0, 0.25) == pytest.approx(0.5)
    v = [0.3, -1.2, 4.0, 2.0]
    for k in range(4):
        assert eu.interpolate(v, 1.0, k / 3) == v[k]
    assert eu.interpolated_sup([1.0, -3.0, 2.0]) == 3.0
    with pytest.raises(ValueError):
        eu.interpolate(v, 1.0, 1.5)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=20))
def test_interpolated_sup_is_max_abs(vals):
    ts = np.linspace(0, 1, 501)
    dense = np.abs([eu.interpolate(vals, 1.0, t) for t in ts])
    assert dense.max() <= eu.interpolated_sup(vals) + 1e-12


def test_exact_gbm():
    noise = eu.NoisePanel.from_array([[1.0]])
    p = eu.exact_gbm_paths(1.0, 0.2, noise, 1.0)
    assert p.terminal[0] == pytest.approx(math.exp(0.2 - 0.02), rel=1e-15)
    q = eu.exact_gbm_paths(2.5, 0.0, eu.NoisePanel(50, 4, 0), 1.0)
    assert np.all(q.values == 2.5)


@pytest.mark.slow
def test_exact_gbm_martingale():
    N = 1_000_000
    p = eu.exact_gbm_paths(1.0, 0.2, eu.NoisePanel(N, 1, 8), 1.0)
    y = p.terminal
    assert abs(y.mean() - 1.0) <= 3 * y.std(ddof=1) / math.sqrt(N)


def test_binary_round_trip(tmp_path):
    sp = spec(diffusion=co.HyperbolaField(0.3), T=2.0)
    p = eu.simulate_batch(sp, eu.SchemeConfig(5, eu.POINT_FROZEN, math.inf, 2.0), eu.NoisePanel(7, 5, 1))
    q = eu.SamplePaths.from_bytes(p.to_bytes())
    assert np.array_equal(p.values, q.values)
    assert q.config.variant == eu.POINT_FROZEN and math.isinf(q.config.s) and q.config.T == 2.0
    p.to_csv(tmp_path / "p.csv")
    rows = (tmp_path / "p.csv").read_text().strip().splitlines()
    assert len(rows) == 8
