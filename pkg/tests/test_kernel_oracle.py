import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.stats import norm

from convexsde import coefficients as co
from convexsde import kernel_oracle as ko
from convexsde.euler import NoisePanel, SchemeConfig, TIME_INTEGRATED, simulate_batch

ZERO = co.ConstantField(0.0)


def quad_abs(s):
    return integrate.quad(lambda z: abs(z) * norm.pdf(z), -s, s, points=[0.0])[0]


def quad_sq(s):
    return integrate.quad(lambda z: z * z * norm.pdf(z), -s, s)[0]


# ---------------------------------------------------------------- measure

def test_measure_zero_threshold():
    m = ko.build_measure(0.0)
    assert m.atom_mass == 1.0 and m.nodes.size == 0
    assert m.moment(np.abs) == 0.0


def test_measure_abs_moment_at_five():
    m = ko.build_measure(5.0)
    assert m.moment(np.abs) == pytest.approx(quad_abs(5.0), abs=1e-10)
    assert m.moment(np.abs) == pytest.approx(0.797881, abs=1e-6)
    assert ko.truncated_abs_mean(5.0) == pytest.approx(quad_abs(5.0), abs=1e-12)


@pytest.mark.parametrize("s", [0.3, 1.0, 2.5, 5.0, 9.0])
def test_measure_moments(s):
    m = ko.build_measure(s, 64)
    assert m.total_mass == pytest.approx(1.0, abs=1e-12)
    assert abs(m.moment(lambda z: z)) <= 1e-12
    assert m.moment(np.abs) == pytest.approx(quad_abs(s), abs=1e-10)
    assert m.moment(lambda z: z * z) == pytest.approx(quad_sq(s), abs=1e-10)
    assert ko.truncated_second_moment(s) == pytest.approx(quad_sq(s), abs=1e-12)
    assert np.all(m.weights >= 0) and np.all(np.abs(m.nodes) <= s)
    assert np.array_equal(m.nodes, -m.nodes[::-1])


def test_measure_large_threshold():
    assert ko.build_measure(40.0).moment(lambda z: z * z) == pytest.approx(1.0, abs=1e-8)


def test_measure_errors():
    with pytest.raises(ValueError):
        ko.build_measure(-1.0)
    with pytest.raises(ValueError):
        ko.build_measure(1.0, 7)


# ---------------------------------------------------------------- one step

def test_one_step_map():
    assert ko.one_step_map(0.0, 2.0, 0.0, 1.0, 0.25) == 1.0
    assert ko.one_step_map(1.5, 0.0, lambda x: -x, 1.0, 0.1) == pytest.approx(1.5 - 0.15)
    assert ko.one_step_map(1.0, -1.0, lambda x: -x, 1.0, 0.1) == pytest.approx(1 - math.sqrt(0.1) - 0.1)
    assert ko.one_step_map(1.0, -1.0, lambda x: -x, 1.0, 0.1) == pytest.approx(0.58377, abs=1e-5)


def wide(n=2001, half=20.0):
    return co.SpatialGrid(-half, half, n)


@pytest.mark.parametrize("method", ["exact", "quadrature"])
def test_kernel_step_identity_square_constant(method):
    g = wide()
    meas = ko.build_measure(5.0)
    h = 0.01
    inner = np.abs(g.nodes) < 10
    lin = ko.kernel_step(ko.GridFunction.from_function(g, lambda x: x), 0.0, 1.0, h, meas, method)
    assert np.max(np.abs(lin.values - g.nodes)[inner]) <= 1e-10
    sq = ko.kernel_step(ko.GridFunction.from_function(g, lambda x: x * x), 0.0, 1.0, h, meas, method)
    assert np.max(np.abs(sq.values - g.nodes**2 - h * quad_sq(5.0))[inner]) <= 1e-8
    c = ko.kernel_step(ko.GridFunction.from_function(g, lambda x: np.full_like(x, 3.0)), 0.0, 1.0, h, meas, method)
    assert np.max(np.abs(c.values - 3.0)) <= 1e-12


def test_exact_and_quadrature_routes_agree():
    g = wide(801, 6.0)
    meas = ko.build_measure(4.0)
    f = ko.GridFunction.from_function(g, lambda x: np.maximum(x - 0.3, 0) + 0.1 * np.exp(0.3 * x))
    sig = lambda x: 0.4 * np.sqrt(1 + x * x)
    a = ko.kernel_step(f, lambda x: -0.2 * x, sig, 0.02, meas, "exact")
    b = ko.kernel_step(f, lambda x: -0.2 * x, sig, 0.02, meas, "quadrature")
    inner = np.abs(g.nodes) < 4
    assert np.max(np.abs(a.values - b.values)[inner]) <= 5e-6


def test_grid_function_nodes_exact():
    g = co.SpatialGrid(-1, 1, 21)
    v = np.sin(3 * g.nodes)
    f = ko.GridFunction(g, v)
    assert np.array_equal(f(g.nodes), v)
    with pytest.raises(ValueError):
        ko.GridFunction(g, np.full(21, np.nan))


# ---------------------------------------------------------------- backward induction

def test_backward_identity_and_square():
    sp = co.SdeSpec(ZERO, co.ConstantField(1.0), 1.0, co.Dirac(0.0))
    m, s = 16, 4.0
    cfg = SchemeConfig(m, TIME_INTEGRATED, s, 1.0)
    meas = ko.build_measure(s)
    g = wide(2001, 30.0)
    inner = np.abs(g.nodes) < 8
    lin = ko.backward_induct_terminal(ko.GridFunction.from_function(g, lambda x: x), sp, cfg, meas)
    assert np.max(np.abs(lin.values - g.nodes)[inner]) <= m * 1e-10
    sq = ko.backward_induct_terminal(ko.GridFunction.from_function(g, lambda x: x * x), sp, cfg, meas)
    assert np.max(np.abs(sq.values - g.nodes**2 - quad_sq(s))[inner]) <= 1e-7


def test_measure_must_match_scheme():
    sp = co.SdeSpec(ZERO, co.ConstantField(1.0), 1.0, co.Dirac(0.0))
    with pytest.raises(ValueError):
        ko.backward_induct_terminal(ko.GridFunction.from_function(wide(), lambda x: x), sp,
                                    SchemeConfig(4, TIME_INTEGRATED, 3.0, 1.0), ko.build_measure(4.0))


@pytest.mark.slow
def test_oracle_matches_monte_carlo_call():
    theta, m, N = 0.2, 64, 400_000
    s = math.sqrt(m) / (2 * theta)
    sp = co.SdeSpec(ZERO, co.ProportionalField(theta), 1.0, co.Dirac(1.0))
    cfg = SchemeConfig(m, TIME_INTEGRATED, s, 1.0)
    g = co.SpatialGrid(0.0, 6.0, 3001)
    v = ko.backward_induct_terminal(ko.GridFunction.from_function(g, lambda x: np.maximum(x - 1, 0)),
                                    sp, cfg, ko.build_measure(s))
    oracle = float(v(np.array([1.0]))[0])
    y = np.maximum(simulate_batch(sp, cfg, NoisePanel(N, m, 12)).terminal - 1, 0)
    assert abs(y.mean() - oracle) <= 3 * y.std(ddof=1) / math.sqrt(N)


# ---------------------------------------------------------------- multi-marginal

def test_multi_marginal_sum_and_product():
    sp = co.SdeSpec(ZERO, co.ConstantField(1.0), 1.0, co.Dirac(0.0))
    m, s = 8, 3.0
    cfg = SchemeConfig(m, TIME_INTEGRATED, s, 1.0)
    meas = ko.build_measure(s)
    g = co.SpatialGrid(-15, 15, 601)
    inner = np.abs(g.nodes) < 4
    k1, k2 = 3, 8
    summ = ko.multi_marginal_induct(ko.GridFunction.from_function(g, lambda u, v: u + v, d=2), (k1, k2), sp, cfg, meas)
    assert np.max(np.abs(summ.values - 2 * g.nodes)[inner]) <= 1e-9
    prod = ko.multi_marginal_induct(ko.GridFunction.from_function(g, lambda u, v: u * v, d=2), (k1, k2), sp, cfg, meas)
    t1 = k1 / m
    assert np.max(np.abs(prod.values - g.nodes**2 - t1 * quad_sq(s))[inner]) <= 1e-6


def test_multi_marginal_dimension_cap():
    g = co.SpatialGrid(-1, 1, 5)
    f = ko.GridFunction.from_function(g, lambda a, b, c, d: a + b + c + d, d=4)
    sp = co.SdeSpec(ZERO, co.ConstantField(1.0), 1.0, co.Dirac(0.0))
    with pytest.raises(ko.UnsupportedDimensionError):
        ko.multi_marginal_induct(f, (1, 2, 3, 4), sp, SchemeConfig(4, TIME_INTEGRATED, 2.0, 1.0), ko.build_measure(2.0))


def test_abs_diff_fails_midpoint_convexity_for_tent():
    h, s = 0.01, 5.0
    sp = co.SdeSpec(ZERO, co.TentField(), h, co.Dirac(0.0))
    g = co.SpatialGrid(-4, 4, 801)
    with pytest.warns(RuntimeWarning):
        out = ko.multi_marginal_induct(ko.GridFunction.from_function(g, lambda u, v: np.abs(u - v), d=2), (0, 1), sp,
                                       SchemeConfig(1, TIME_INTEGRATED, s, h), ko.build_measure(s))
    v = out(np.array([-1.0, 0.0, 1.0]))
    assert v[1] - 0.5 * (v[0] + v[2]) > 0.07


# ---------------------------------------------------------------- defects and gaps

def test_convexity_defect_examples():
    g = co.SpatialGrid(-1, 1, 201)
    sq = ko.grid_convexity_defect(ko.GridFunction.from_function(g, lambda x: x * x))
    assert sq["min_second_difference"] == pytest.approx(2 * g.dx**2, rel=1e-9)
    assert sq["min_curvature"] == pytest.approx(2.0, rel=1e-9)
    assert ko.grid_convexity_defect(ko.GridFunction.from_function(g, np.abs))["min_second_difference"] >= -1e-15
    neg = ko.GridFunction.from_function(g, lambda x: -x * x)
    d2 = np.diff(neg.values, 2)
    assert np.all(d2 < 0)
    with pytest.raises(ValueError):
        ko.grid_convexity_defect(ko.GridFunction(co.SpatialGrid(0, 1, 2), [0.0, 1.0]))


def _pair(sx, sy, x0=1.0):
    return co.SdeSpec(ZERO, sx, 1.0, co.Dirac(x0)), co.SdeSpec(ZERO, sy, 1.0, co.Dirac(x0))


def test_ordering_gap_identical_is_zero():
    X, _ = _pair(co.HyperbolaField(0.2), co.HyperbolaField(0.2))
    cfg = SchemeConfig(16, TIME_INTEGRATED, 8.0, 1.0)
    g = ko.oracle_grid(X, 801)
    f = ko.GridFunction.from_function(g, lambda x: np.maximum(x - 1, 0))
    with pytest.warns(RuntimeWarning):
        gap = ko.kernel_ordering_gap(f, X, X, cfg, ko.build_measure(8.0))
    assert np.max(np.abs(gap.values)) <= 1e-12


def test_ordering_gap_strict_for_constant_volatilities():
    X, Y = _pair(co.ConstantField(0.2), co.ConstantField(0.3))
    cfg = SchemeConfig(32, TIME_INTEGRATED, math.inf, 1.0)
    g = co.SpatialGrid(-4, 6, 1001)
    f = ko.GridFunction.from_function(g, lambda x: np.maximum(x - 1, 0))
    gap = ko.kernel_ordering_gap(f, X, Y, cfg, ko.build_measure(math.inf))
    inner = np.abs(g.nodes - 1) < 2
    assert np.all(gap.values[inner] > 0)


def test_ordering_gap_hyperbola():
    X, Y = _pair(co.HyperbolaField(0.2), co.HyperbolaField(0.3))
    c = co.derive_constants(ZERO, co.HyperbolaField(0.3), 1.0)
    m = max(32, math.ceil(c.m_min))
    s = co.derive_scheme_bounds(c, 1.0, m).s_default
    cfg = SchemeConfig(m, TIME_INTEGRATED, s, 1.0)
    g = ko.oracle_grid(Y, 2001)
    f = ko.GridFunction.from_function(g, lambda x: np.maximum(x - 1, 0))
    with pytest.warns(RuntimeWarning):
        gap = ko.kernel_ordering_gap(f, X, Y, cfg, ko.build_measure(s))
    assert gap.values.min() >= -1e-9


def test_ordering_gap_reports_violations():
    X, Y = _pair(co.ConstantField(0.3), co.ConstantField(0.2))
    g = co.SpatialGrid(-3, 3, 61)
    f = ko.GridFunction.from_function(g, lambda x: np.maximum(x, 0))
    with pytest.raises(ko.AssumptionViolation) as exc:
        ko.kernel_ordering_gap(f, X, Y, SchemeConfig(4, TIME_INTEGRATED, 3.0, 1.0), ko.build_measure(3.0))
    assert exc.value.witnesses


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 0.5), st.floats(-1, 1), st.floats(0.5, 2.0))
def test_propagation_property_call(theta, K, x0):
    """Random hyperbola coefficients: the induced value function stays convex and non-decreasing."""
    sp = co.SdeSpec(ZERO, co.HyperbolaField(theta), 1.0, co.Dirac(x0))
    c = co.derive_constants(ZERO, sp.diffusion, 1.0)
    m = max(8, math.ceil(c.m_min))
    s = co.derive_scheme_bounds(c, 1.0, m).s_default
    g = co.SpatialGrid(-6, 6, 401)
    f = ko.GridFunction.from_function(g, lambda x: np.maximum(x - K, 0))
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        v = ko.backward_induct_terminal(f, sp, SchemeConfig(m, TIME_INTEGRATED, s, 1.0), ko.build_measure(s))
    d = ko.grid_convexity_defect(v)
    assert d["min_second_difference"] >= -1e-8
    assert d["min_first_difference"] >= -1e-8
