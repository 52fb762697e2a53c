import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from convexsde import functionals as fn
from convexsde.functionals import make_functional

BUILTIN_CASES = [
    ("call", {}), ("put", {"K": 0.5}), ("square", {}), ("identity", {}), ("constant", {"c": 7.0}),
    ("exp", {}), ("pos_square", {}), ("abs_diff", {}), ("quadratic", {"a": 1, "b": 1, "c": 1}),
    ("quadratic", {"a": 1, "b": 1, "c": 2}), ("quadratic", {"a": 1, "b": 1, "c": -0.5}),
    ("product", {}), ("running_integral", {"outer": "square", "inner": "exp", "marginals": [0.5, 1.0]}),
    ("running_integral", {"outer": "exp", "inner": "identity", "marginals": [0.5, 1.0]}),
    ("running_integral", {"outer": "call", "inner": "softplus", "K": 0.2}),
    ("sup_norm", {}), ("avg_call", {}), ("avg_call", {"marginals": [0.25, 0.5, 1.0]}),
]


def test_classify_quadratic():
    assert fn.classify_quadratic(1, 1, 1) == {"convex": True, "dir_convex": True}
    assert fn.classify_quadratic(1, 1, 2) == {"convex": False, "dir_convex": True}
    assert fn.classify_quadratic(1, 1, -0.5) == {"convex": True, "dir_convex": False}
    assert fn.classify_quadratic(1, 4, -3) == {"convex": False, "dir_convex": False}
    with pytest.raises(ValueError):
        fn.classify_quadratic(0, 1, 0)


def test_abs_diff_witness_defect():
    f = make_functional("abs_diff")
    assert f.witnesses["dir_convex"] == ([1.0, 0.0], [1.0, 0.0], [1.0, 2.5])
    # |3 - 2.5| - |2 - 0| - |2 - 2.5| + |1 - 0|
    assert fn.verify_witness(f, "dir_convex") == -1.0


def test_quadratic_dir_convex_but_not_convex():
    f = make_functional("quadratic", a=1, b=1, c=2)
    assert fn.check_directional_convexity(f, 20_000, seed=3).violations == 0
    rep = fn.check_convexity(f, 20_000, seed=3)
    assert rep.violations > 0 and rep.worst[-1] < 0
    assert fn.verify_witness(f, "convex") < 0


@pytest.mark.parametrize("outer", ["square", "exp"])
def test_running_integral_of_exp_is_dir_convex(outer):
    f = make_functional("running_integral", outer=outer, inner="exp", marginals=[0.5, 1.0])
    assert f.is_dir_convex
    assert fn.check_directional_convexity(f, 20_000, seed=1).violations == 0
    assert fn.check_convexity(f, 20_000, seed=1).violations == 0


def test_path_functionals_convex():
    for f in (make_functional("avg_call"), make_functional("sup_norm")):
        assert f.is_convex
        assert fn.check_convexity(f, 20_000, seed=2).violations == 0


@pytest.mark.parametrize("id_,params", BUILTIN_CASES)
def test_declared_flags_survive_checks(id_, params):
    f = make_functional(id_, **params)
    checks = {"convex": (f.is_convex, fn.check_convexity),
              "dir_convex": (f.is_dir_convex, fn.check_directional_convexity),
              "nondecreasing": (f.is_nondecreasing, fn.check_nondecreasing)}
    for flag, (declared, check) in checks.items():
        if declared:
            assert check(f, 5_000, seed=5).violations == 0, flag
        elif flag in f.witnesses:
            assert fn.verify_witness(f, flag) < 0, flag


@pytest.mark.parametrize("id_,params", [c for c in BUILTIN_CASES if c[0] != "product"])
def test_dir_convex_builtins_are_convex_in_each_coordinate(id_, params):
    f = make_functional(id_, **params)
    if not f.is_dir_convex:
        pytest.skip("not declared directionally convex")
    rng = np.random.default_rng(11)
    x = rng.uniform(-2, 2, (2000, f.dim))
    e = np.zeros(f.dim)
    for i in range(f.dim):
        e[:] = 0
        e[i] = rng.uniform(0.1, 1)
        a, b, c = f.point(x - e), f.point(x), f.point(x + e)
        assert np.all(a + c - 2 * b >= -1e-9 * (1 + np.abs(b)))


@pytest.mark.parametrize("id_,params", [c for c in BUILTIN_CASES if make_functional(c[0], **c[1]).lipschitz is not None])
def test_lipschitz_declarations(id_, params):
    f = make_functional(id_, **params)
    assert fn.check_lipschitz(f, 5_000, seed=7).violations == 0


def test_lipschitz_check_needs_constant():
    with pytest.raises(ValueError):
        fn.check_lipschitz(make_functional("square"), 10)


def test_unknown_functional_and_bad_marginals():
    with pytest.raises(ValueError):
        make_functional("nope")
    with pytest.raises(ValueError):
        make_functional("abs_diff", marginals=[0.5])
    with pytest.raises(ValueError):
        fn.marginal_steps([0.5, 0.5], 8)


def test_evaluate_selects_columns():
    panel = np.arange(9 * 3, dtype=float).reshape(9, 3)
    assert np.array_equal(make_functional("identity").evaluate(panel, 1.0), panel[-1])
    f = make_functional("product", marginals=[0.5, 1.0])
    assert np.array_equal(f.evaluate(panel, 1.0), panel[4] * panel[8])
    assert fn.marginal_steps([0.25, 1.0], 8) == [2, 8]


def test_trapezoid_running_integral_of_constant_path():
    f = make_functional("running_integral", outer="identity", inner="identity")
    cols = [np.full(4, 3.0)] * 5
    assert np.allclose(f(cols, 2.0), 6.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 3), st.floats(0.1, 3), st.floats(-4, 4))
def test_quadratic_classification_matches_checks(a, b, c):
    f = make_functional("quadratic", a=a, b=b, c=c)
    cls = fn.classify_quadratic(a, b, c)
    if abs(abs(c) - math.sqrt(a * b)) > 0.05 and abs(c) > 0.05:
        dir_rep = fn.check_directional_convexity(f, 2000, seed=0)
        assert (dir_rep.violations == 0) == cls["dir_convex"]
        assert (fn.check_convexity(f, 2000, seed=0).violations == 0) == cls["convex"]
