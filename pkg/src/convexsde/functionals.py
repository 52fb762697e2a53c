"""Test functions and path functionals with declared convexity classes.

Every functional evaluates on a list of columns: one array per coordinate.
Terminal functionals take one column (the value at T); multi-marginal ones
take the values at their marginal times; path functionals take all grid
values of a piecewise-linear path.  The same callable therefore serves the
Monte Carlo estimators and the randomized class checkers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "TestFunctional",
    "CheckReport",
    "classify_quadratic",
    "check_directional_convexity",
    "check_convexity",
    "check_nondecreasing",
    "check_lipschitz",
    "verify_witness",
    "make_functional",
    "BUILTINS",
    "OUTER",
    "INNER",
    "marginal_steps",
]

DEFECT_TOL = 1e-10


@dataclass(eq=False)
class TestFunctional:
    """A functional with declared class flags.

    kind is "terminal", "multi_marginal" (``marginals`` holds time fractions
    in (0, 1]) or "path".  ``fn(cols, T)`` maps a list of coordinate arrays to
    an array of values.  ``lipschitz`` is with respect to the max norm of the
    coordinates, which for paths is the sup norm of the interpolated path.
    ``witnesses`` maps a flag name to points showing that a declared-false
    flag is indeed false.
    """

    __test__ = False  # not a pytest class

    id: str
    kind: str
    fn: Callable
    is_convex: bool
    is_dir_convex: bool
    is_nondecreasing: bool
    lipschitz: float | None = None
    growth_order: float = 1.0
    params: dict = field(default_factory=dict)
    marginals: tuple = ()
    witnesses: dict = field(default_factory=dict)
    path_points: int = 9  # dimension used when checking a path functional

    @property
    def dim(self):
        if self.kind == "terminal":
            return 1
        if self.kind == "multi_marginal":
            return len(self.marginals)
        return self.path_points

    def __call__(self, cols: Sequence[np.ndarray], T: float = 1.0):
        return np.asarray(self.fn(list(cols), T), dtype=float)

    def point(self, x, T: float = 1.0):
        """Evaluate at points of shape (..., dim)."""
        x = np.asarray(x, dtype=float)
        return self([x[..., i] for i in range(x.shape[-1])], T)

    def columns(self, panel: np.ndarray, T: float):
        """Select this functional's coordinates from a step-major (m+1, n) panel."""
        m = panel.shape[0] - 1
        if self.kind == "terminal":
            return [panel[-1]]
        if self.kind == "multi_marginal":
            return [panel[k] for k in marginal_steps(self.marginals, m)]
        return list(panel)

    def evaluate(self, panel: np.ndarray, T: float):
        return self(self.columns(panel, T), T)

    def describe(self):
        return {"id": self.id, "kind": self.kind, "params": dict(self.params),
                "marginals": list(self.marginals), "is_convex": self.is_convex,
                "is_dir_convex": self.is_dir_convex, "is_nondecreasing": self.is_nondecreasing,
                "lipschitz": self.lipschitz, "growth_order": self.growth_order}


def marginal_steps(fractions, m: int):
    """Step indices of marginal time fractions on an m-step grid."""
    ks = [int(round(float(f) * m)) for f in fractions]
    if any(k < 0 or k > m for k in ks) or any(b <= a for a, b in zip(ks, ks[1:])):
        raise ValueError(f"marginal fractions {list(fractions)} do not give increasing steps for m={m}")
    return ks


# ---------------------------------------------------------------------------
# building blocks for composite functionals
#
# OUTER maps: name -> (callable, convex, nondecreasing, nondecreasing on [0, inf), lipschitz)
# INNER maps: name -> (callable, convex, nondecreasing, nonnegative, lipschitz)


def _softplus(x):
    return np.logaddexp(0.0, x)


OUTER = {
    "square": (lambda w, K=0.0: w * w, True, False, True, None),
    "pos_square": (lambda w, K=0.0: np.maximum(w - K, 0.0) ** 2, True, True, True, None),
    "exp": (lambda w, K=0.0: np.exp(w), True, True, True, None),
    "identity": (lambda w, K=0.0: w, True, True, True, 1.0),
    "call": (lambda w, K=0.0: np.maximum(w - K, 0.0), True, True, True, 1.0),
}

INNER = {
    "exp": (lambda x: np.exp(x), True, True, True, None),
    "identity": (lambda x: x, True, True, False, 1.0),
    "softplus": (_softplus, True, True, True, 1.0),
    "square": (lambda x: x * x, True, False, True, None),
    "call": (lambda x, K=0.0: np.maximum(x - K, 0.0), True, True, True, 1.0),
}


def classify_quadratic(a: float, b: float, c: float) -> dict:
    """Convexity classes of a u^2 + 2 c u v + b v^2 for a, b > 0."""
    if not (a > 0 and b > 0):
        raise ValueError("a and b must be positive")
    return {"convex": abs(c) <= math.sqrt(a * b), "dir_convex": c >= 0}


# ---------------------------------------------------------------------------
# built-ins


def _terminal(id_, fn, convex, nondec, lip, growth, params, witnesses=None):
    return TestFunctional(id_, "terminal", lambda cols, T: fn(cols[0]), convex, convex, nondec,
                          lip, growth, params, (), witnesses or {})


def _call(K=1.0):
    return _terminal("call", lambda x: np.maximum(x - K, 0.0), True, True, 1.0, 1, {"K": K})


def _put(K=1.0):
    return _terminal("put", lambda x: np.maximum(K - x, 0.0), True, False, 1.0, 1, {"K": K},
                     {"nondecreasing": ([K - 1.0], [K])})


def _square():
    return _terminal("square", lambda x: x * x, True, False, None, 2, {},
                     {"nondecreasing": ([-1.0], [0.0])})


def _identity():
    return _terminal("identity", lambda x: x, True, True, 1.0, 1, {})


def _constant(c=0.0):
    return _terminal("constant", lambda x: np.full(np.shape(x), float(c)), True, True, 0.0, 0, {"c": c})


def _exp(a=1.0):
    if a < 0:
        raise ValueError("exp functional needs a >= 0 to be non-decreasing")
    return _terminal("exp", lambda x: np.exp(a * x), True, True, None, 1, {"a": a})


def _pos_square(K=0.0):
    return _terminal("pos_square", lambda x: np.maximum(x - K, 0.0) ** 2, True, True, None, 2, {"K": K})


def _two(marginals):
    marginals = tuple(float(t) for t in marginals)
    if len(marginals) != 2:
        raise ValueError("this functional needs exactly two marginal times")
    return marginals


def _abs_diff(marginals=(0.5, 1.0)):
    mg = _two(marginals)
    wit = {"dir_convex": ([1.0, 0.0], [1.0, 0.0], [1.0, 2.5]),
           "nondecreasing": ([0.0, 1.0], [1.0, 1.0])}
    return TestFunctional("abs_diff", "multi_marginal", lambda cols, T: np.abs(cols[0] - cols[1]),
                          True, False, False, 2.0, 1, {}, mg, wit)


def _quadratic(a=1.0, b=1.0, c=0.0, marginals=(0.5, 1.0)):
    mg = _two(marginals)
    cls = classify_quadratic(a, b, c)
    wit = {"nondecreasing": ([-1.0, 0.0], [0.0, 0.0])}
    if not cls["dir_convex"]:
        wit["dir_convex"] = ([0.0, 0.0], [1.0, 0.0], [0.0, 1.0])
    if not cls["convex"]:
        w, vec = np.linalg.eigh(np.array([[a, c], [c, b]]))
        e = vec[:, 0].tolist()
        wit["convex"] = (e, [-t for t in e])
    return TestFunctional(
        "quadratic", "multi_marginal",
        lambda cols, T: a * cols[0] ** 2 + 2 * c * cols[0] * cols[1] + b * cols[1] ** 2,
        cls["convex"], cls["dir_convex"], False, None, 2, {"a": a, "b": b, "c": c}, mg, wit)


def _product(marginals=(0.5, 1.0)):
    mg = _two(marginals)
    wit = {"convex": ([1.0, -1.0], [-1.0, 1.0]), "nondecreasing": ([0.0, -1.0], [1.0, -1.0])}
    return TestFunctional("product", "multi_marginal", lambda cols, T: cols[0] * cols[1],
                          False, True, False, None, 2, {}, mg, wit)


def _trapezoid(cols, T):
    m = len(cols) - 1
    h = T / m
    acc = 0.5 * (cols[0] + cols[-1])
    for c in cols[1:-1]:
        acc = acc + c
    return h * acc


def _running_integral(outer="square", inner="exp", K=0.0, marginals=None, K_inner=None):
    if outer not in OUTER or inner not in INNER:
        raise ValueError(f"unknown running-integral parts {outer!r}/{inner!r}")
    po, o_cvx, o_nd, o_nd_pos, o_lip = OUTER[outer]
    pi, i_cvx, i_nd, i_pos, i_lip = INNER[inner]
    Ki = float(K if K_inner is None else K_inner)
    phi = (lambda x: pi(x, Ki)) if inner == "call" else pi
    psi_nd = o_nd or (o_nd_pos and i_pos)
    if inner == "identity":
        # convex outer map of a positive linear combination
        convex = dir_convex = o_cvx
    else:
        convex = o_cvx and i_cvx and psi_nd
        dir_convex = convex and i_nd
    nondec = psi_nd and i_nd
    params = {"outer": outer, "inner": inner, "K": float(K)}
    if marginals is None:
        def fn(cols, T):
            return po(_trapezoid([phi(c) for c in cols], T), K)
        kind, mg = "path", ()
    else:
        mg = tuple(float(t) for t in marginals)
        if any(b <= a for a, b in zip(mg, mg[1:])) or mg[0] <= 0:
            raise ValueError("marginal fractions must be increasing and positive")
        wts = np.diff(np.concatenate([[0.0], mg]))

        def fn(cols, T):
            acc = 0.0
            for w, c in zip(wts, cols):
                acc = acc + (w * T) * phi(c)
            return po(acc, K)
        kind = "multi_marginal"
    lip = None if (o_lip is None or i_lip is None) else o_lip * i_lip  # for T = 1
    f = TestFunctional("running_integral", kind, fn, convex, dir_convex, nondec, lip,
                       2 if outer in ("square", "pos_square") else 1, params, mg)
    _search_witnesses(f)
    return f


def _sup_norm():
    n = 9
    wit = {"dir_convex": ([0.0] * n, [1.0] + [0.0] * (n - 1), [0.0, 1.0] + [0.0] * (n - 2)),
           "nondecreasing": ([-1.0] * n, [0.0] * n)}
    return TestFunctional("sup_norm", "path", lambda cols, T: np.max(np.abs(np.stack(cols)), axis=0),
                          True, False, False, 1.0, 1, {}, (), wit)


def _avg_call(K=1.0, marginals=None):
    if marginals is None:
        return TestFunctional("avg_call", "path",
                              lambda cols, T: np.maximum(_trapezoid(cols, T) / T - K, 0.0),
                              True, True, True, 1.0, 1, {"K": K})
    mg = tuple(float(t) for t in marginals)
    return TestFunctional("avg_call", "multi_marginal",
                          lambda cols, T: np.maximum(sum(cols) / len(cols) - K, 0.0),
                          True, True, True, 1.0, 1, {"K": K}, mg)


BUILTINS: dict[str, Callable[..., TestFunctional]] = {
    "call": _call,
    "put": _put,
    "square": _square,
    "identity": _identity,
    "constant": _constant,
    "exp": _exp,
    "pos_square": _pos_square,
    "abs_diff": _abs_diff,
    "quadratic": _quadratic,
    "product": _product,
    "running_integral": _running_integral,
    "sup_norm": _sup_norm,
    "avg_call": _avg_call,
}


def make_functional(id_: str, **params) -> TestFunctional:
    try:
        builder = BUILTINS[id_]
    except KeyError:
        raise ValueError(f"unknown functional {id_!r}; known: {sorted(BUILTINS)}") from None
    f = builder(**params)
    if f.kind == "multi_marginal" and "marginals" not in f.params:
        f.params = {**f.params, "marginals": list(f.marginals)}
    return f


# ---------------------------------------------------------------------------
# randomized checkers


@dataclass
class CheckReport:
    violations: int
    trials: int
    worst: tuple | None  # points followed by the defect

    @property
    def passed(self):
        return self.violations == 0


def _rng(seed):
    return np.random.Generator(np.random.Philox(key=np.array([seed, 0x5EED], dtype=np.uint64)))


def _box(box):
    lo, hi = (float(box[0]), float(box[1])) if box is not None else (-2.0, 2.0)
    if not hi > lo:
        raise ValueError("box needs hi > lo")
    return lo, hi


def _tol(*vals):
    scale = np.max(np.abs(np.stack(vals)), axis=0)
    return DEFECT_TOL + 1e-12 * scale


def _batches(trials, size=20000):
    done = 0
    while done < trials:
        k = min(size, trials - done)
        yield k
        done += k


def check_directional_convexity(f: TestFunctional, trials: int = 100_000, box=None,
                                seed: int = 0) -> CheckReport:
    """Count rectangle-increment defects f(x+y+z) - f(x+y) - f(x+z) + f(x) < -tol.

    x is uniform in the box, y and z uniform in [0, (hi - lo) / 2]^d.  The
    tolerance is 1e-10 plus 1e-12 times the largest term, so rounding in
    large values is not counted as a defect.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    lo, hi = _box(box)
    d = f.dim
    rng = _rng(seed)
    count, worst = 0, None
    for k in _batches(trials):
        x = rng.uniform(lo, hi, (k, d))
        y = rng.uniform(0, (hi - lo) / 2, (k, d))
        z = rng.uniform(0, (hi - lo) / 2, (k, d))
        a, b, c, e = f.point(x + y + z), f.point(x + y), f.point(x + z), f.point(x)
        defect = a - b - c + e
        bad = defect < -_tol(a, b, c, e)
        count += int(bad.sum())
        i = int(np.argmin(defect))
        if worst is None or defect[i] < worst[-1]:
            worst = (x[i].tolist(), y[i].tolist(), z[i].tolist(), float(defect[i]))
    return CheckReport(count, trials, worst)


def check_convexity(f: TestFunctional, trials: int = 100_000, box=None, seed: int = 0) -> CheckReport:
    """Midpoint test f((u + v) / 2) <= (f(u) + f(v)) / 2 + tol on random pairs."""
    lo, hi = _box(box)
    rng = _rng(seed + 1)
    count, worst = 0, None
    for k in _batches(trials):
        u = rng.uniform(lo, hi, (k, f.dim))
        v = rng.uniform(lo, hi, (k, f.dim))
        fu, fv, fm = f.point(u), f.point(v), f.point(0.5 * (u + v))
        defect = 0.5 * (fu + fv) - fm
        bad = defect < -_tol(fu, fv, fm)
        count += int(bad.sum())
        i = int(np.argmin(defect))
        if worst is None or defect[i] < worst[-1]:
            worst = (u[i].tolist(), v[i].tolist(), float(defect[i]))
    return CheckReport(count, trials, worst)


def check_nondecreasing(f: TestFunctional, trials: int = 100_000, box=None, seed: int = 0) -> CheckReport:
    """f(x + y) >= f(x) - tol for y >= 0 componentwise."""
    lo, hi = _box(box)
    rng = _rng(seed + 2)
    count, worst = 0, None
    for k in _batches(trials):
        x = rng.uniform(lo, hi, (k, f.dim))
        y = rng.uniform(0, (hi - lo) / 2, (k, f.dim))
        fx, fy = f.point(x), f.point(x + y)
        defect = fy - fx
        bad = defect < -_tol(fx, fy)
        count += int(bad.sum())
        i = int(np.argmin(defect))
        if worst is None or defect[i] < worst[-1]:
            worst = (x[i].tolist(), (x[i] + y[i]).tolist(), float(defect[i]))
    return CheckReport(count, trials, worst)


def check_lipschitz(f: TestFunctional, trials: int = 100_000, box=None, seed: int = 0) -> CheckReport:
    """|f(u) - f(v)| <= L max_i |u_i - v_i| + tol on random pairs (T = 1)."""
    if f.lipschitz is None:
        raise ValueError(f"{f.id} declares no Lipschitz constant")
    lo, hi = _box(box)
    rng = _rng(seed + 3)
    count, worst = 0, None
    for k in _batches(trials):
        u = rng.uniform(lo, hi, (k, f.dim))
        v = rng.uniform(lo, hi, (k, f.dim))
        fu, fv = f.point(u), f.point(v)
        slack = f.lipschitz * np.max(np.abs(u - v), axis=-1) - np.abs(fu - fv)
        bad = slack < -_tol(fu, fv)
        count += int(bad.sum())
        i = int(np.argmin(slack))
        if worst is None or slack[i] < worst[-1]:
            worst = (u[i].tolist(), v[i].tolist(), float(slack[i]))
    return CheckReport(count, trials, worst)


def _search_witnesses(f: TestFunctional, trials: int = 4000):
    """Store a violation witness for every declared-false flag a seeded search can find."""
    checks = {"convex": (f.is_convex, check_convexity),
              "dir_convex": (f.is_dir_convex, check_directional_convexity),
              "nondecreasing": (f.is_nondecreasing, check_nondecreasing)}
    for flag, (declared, check) in checks.items():
        if declared or flag in f.witnesses:
            continue
        rep = check(f, trials, (-2.0, 2.0), seed=0)
        if rep.violations:
            f.witnesses[flag] = tuple(rep.worst[:-1])


def verify_witness(f: TestFunctional, flag: str) -> float:
    """Recompute the defect at the stored witness for a declared-false flag (negative = confirmed)."""
    pts = f.witnesses[flag]
    if flag == "dir_convex":
        x, y, z = (np.asarray(p, float) for p in pts)
        return float(f.point(x + y + z) - f.point(x + y) - f.point(x + z) + f.point(x))
    if flag == "convex":
        u, v = (np.asarray(p, float) for p in pts)
        return float(0.5 * (f.point(u) + f.point(v)) - f.point(0.5 * (u + v)))
    if flag == "nondecreasing":
        x, y = (np.asarray(p, float) for p in pts)
        if np.any(y < x):
            raise ValueError("nondecreasing witness needs y >= x")
        return float(f.point(y) - f.point(x))
    raise KeyError(flag)
