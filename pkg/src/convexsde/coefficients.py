"""Coefficient fields, regularity constants and scheme admissibility bounds.

A coefficient field is a function f(t, x) on [0, T] x R.  Built-in families
carry their exact Lipschitz constant, the semi-convexity constant of f**2
and the monotonicity defect of f, so the grid estimators below serve as
cross-checks rather than as the source of truth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "CoefficientField",
    "ConstantField",
    "AffineField",
    "ProportionalField",
    "HyperbolaField",
    "TentField",
    "SmoothedCEVField",
    "TabulatedField",
    "CallableField",
    "FAMILIES",
    "make_field",
    "SpatialGrid",
    "default_grid",
    "default_times",
    "Dirac",
    "TwoPoint",
    "SampleTable",
    "make_initial",
    "SdeSpec",
    "ConstantsReport",
    "SchemeBounds",
    "EvaluationError",
    "InvalidGridError",
    "grid_lipschitz",
    "estimate_lipschitz",
    "estimate_a_sigma",
    "estimate_c_b",
    "derive_constants",
    "derive_scheme_bounds",
    "h_bar_formula",
    "m_min_formula",
]


class EvaluationError(ValueError):
    """A coefficient returned a non-finite value."""

    def __init__(self, t, x, name=""):
        self.t = float(t)
        self.x = float(x)
        super().__init__(f"non-finite value of {name or 'field'} at t={self.t!r}, x={self.x!r}")


class InvalidGridError(ValueError):
    pass


# Gauss-Legendre nodes on [0, 1] used when a field has no closed-form time integral.
_GL16_X, _GL16_W = np.polynomial.legendre.leggauss(16)
_GL16_X = 0.5 * (_GL16_X + 1.0)
_GL16_W = 0.5 * _GL16_W


class CoefficientField:
    """Base class.  Subclasses implement ``value`` and the constant properties.

    Attributes
    ----------
    family_id : str
    params : tuple of float
    has_closed_time_integrals : bool
    time_constant : bool
        True when f does not depend on t.  Both Euler variants then use
        exactly the same effective coefficients.
    """

    family_id = "abstract"
    has_closed_time_integrals = True
    time_constant = True

    # exact constants; None means "unknown, estimate on a grid"
    lip_exact: float | None = None
    a_exact: float | None = None  # semi-convexity constant of f**2
    c_exact: float | None = None  # least c making f + c x non-decreasing
    convex: bool | None = None

    params: tuple = ()

    def value(self, t, x):
        raise NotImplementedError

    def __call__(self, t, x):
        return self.value(t, x)

    # effective per-step coefficients -------------------------------------------------
    def step_mean(self, t0, t1, x):
        """Time average of f(., x) over [t0, t1]."""
        if self.time_constant:
            return self.value(t0, x)
        return self._quad_mean(t0, t1, x, square=False)

    def step_rms(self, t0, t1, x):
        """Square root of the time average of f(., x)**2 over [t0, t1].

        For time-constant fields this is |f(x)|, so the time-integrated and
        point-frozen schemes agree bit for bit whenever f >= 0.
        """
        if self.time_constant:
            return np.abs(self.value(t0, x))
        ms = self._quad_mean(t0, t1, x, square=True)
        return np.sqrt(np.maximum(ms, 0.0))

    def _quad_mean(self, t0, t1, x, square):
        x = np.asarray(x, dtype=float)
        acc = np.zeros_like(x)
        for u, w in zip(_GL16_X, _GL16_W):
            v = self.value(t0 + u * (t1 - t0), x)
            acc = acc + w * (v * v if square else v)
        return acc

    def time_breaks(self):
        """Times at which the field changes (piecewise-constant time dependence)."""
        return ()

    def sup_at_zero(self, times=None):
        ts = list(self.time_breaks()) + [0.0]
        if times is not None:
            ts += list(np.atleast_1d(times))
        vals = [abs(float(np.asarray(self.value(t, np.array([0.0])))[0])) for t in ts]
        return max(vals)

    def to_config(self):
        return {"family": self.family_id, "params": [float(p) for p in self.params]}

    def __repr__(self):
        return f"{type(self).__name__}({', '.join(repr(p) for p in self.params)})"


@dataclass(frozen=True, repr=False)
class ConstantField(CoefficientField):
    c: float

    family_id = "constant"

    @property
    def params(self):
        return (self.c,)

    def value(self, t, x):
        return np.full(np.shape(x), float(self.c)) if np.ndim(x) else float(self.c)

    lip_exact = 0.0
    a_exact = 0.0
    c_exact = 0.0
    convex = True


@dataclass(frozen=True, repr=False)
class AffineField(CoefficientField):
    """f(t, x) = lam(t) + mu(t) x with lam, mu piecewise constant in t.

    ``pieces`` is a tuple of (start_time, lam, mu); the first start time is 0.
    """

    pieces: tuple

    family_id = "affine"

    def __post_init__(self):
        starts = [p[0] for p in self.pieces]
        if not self.pieces or starts[0] != 0.0 or any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("affine pieces need increasing start times beginning at 0")

    @classmethod
    def from_params(cls, params):
        params = [float(p) for p in params]
        if len(params) < 2 or (len(params) - 2) % 3:
            raise ValueError("affine params are [lam0, mu0, t1, lam1, mu1, ...]")
        pieces = [(0.0, params[0], params[1])]
        for i in range(2, len(params), 3):
            pieces.append(tuple(params[i:i + 3]))
        return cls(tuple(pieces))

    @property
    def params(self):
        out = [self.pieces[0][1], self.pieces[0][2]]
        for p in self.pieces[1:]:
            out += list(p)
        return tuple(out)

    @property
    def time_constant(self):
        return len(self.pieces) == 1

    def time_breaks(self):
        return tuple(p[0] for p in self.pieces)

    def _piece(self, t):
        idx = 0
        for i, p in enumerate(self.pieces):
            if t >= p[0]:
                idx = i
        return self.pieces[idx]

    def value(self, t, x):
        _, lam, mu = self._piece(t)
        return lam + mu * np.asarray(x, dtype=float) if np.ndim(x) else lam + mu * x

    def _overlaps(self, t0, t1):
        out = []
        for i, (start, lam, mu) in enumerate(self.pieces):
            end = self.pieces[i + 1][0] if i + 1 < len(self.pieces) else math.inf
            lo, hi = max(start, t0), min(end, t1)
            if hi > lo:
                out.append((hi - lo, lam, mu))
        return out

    def step_mean(self, t0, t1, x):
        if self.time_constant:
            return self.value(t0, x)
        ov = self._overlaps(t0, t1)
        dt = t1 - t0
        lam = sum(w * a for w, a, _ in ov) / dt
        mu = sum(w * b for w, _, b in ov) / dt
        return lam + mu * np.asarray(x, dtype=float)

    def step_rms(self, t0, t1, x):
        if self.time_constant:
            return np.abs(self.value(t0, x))
        x = np.asarray(x, dtype=float)
        ov = self._overlaps(t0, t1)
        if len(ov) == 1:
            return np.abs(ov[0][1] + ov[0][2] * x)
        ms = sum(w * (a + b * x) ** 2 for w, a, b in ov) / (t1 - t0)
        return np.sqrt(np.maximum(ms, 0.0))

    @property
    def lip_exact(self):
        return max(abs(p[2]) for p in self.pieces)

    a_exact = 0.0

    @property
    def c_exact(self):
        return max(0.0, -min(p[2] for p in self.pieces))

    convex = True


@dataclass(frozen=True, repr=False)
class ProportionalField(CoefficientField):
    """f(x) = theta x."""

    theta: float

    family_id = "proportional"

    @property
    def params(self):
        return (self.theta,)

    def value(self, t, x):
        return self.theta * np.asarray(x, dtype=float) if np.ndim(x) else self.theta * x

    @property
    def lip_exact(self):
        return abs(self.theta)

    a_exact = 0.0

    @property
    def c_exact(self):
        return max(0.0, -self.theta)

    convex = True


@dataclass(frozen=True, repr=False)
class HyperbolaField(CoefficientField):
    """f(x) = theta sqrt(1 + x^2)."""

    theta: float

    family_id = "hyperbola"

    @property
    def params(self):
        return (self.theta,)

    def value(self, t, x):
        x = np.asarray(x, dtype=float)
        return self.theta * np.sqrt(1.0 + x * x)

    @property
    def lip_exact(self):
        return abs(self.theta)

    a_exact = 0.0

    @property
    def c_exact(self):
        # slope ranges over (-|theta|, |theta|)
        return abs(self.theta)

    @property
    def convex(self):
        return self.theta >= 0


@dataclass(frozen=True, repr=False)
class TentField(CoefficientField):
    """f(x) = 2 - min(|x|, 1): a Lipschitz, non-convex diffusion coefficient."""

    family_id = "tent"

    @property
    def params(self):
        return ()

    def value(self, t, x):
        x = np.asarray(x, dtype=float)
        return 2.0 - np.minimum(np.abs(x), 1.0)

    lip_exact = 1.0
    a_exact = math.inf  # concave kink of f**2 at 0
    c_exact = 1.0
    convex = False


@dataclass(frozen=True, repr=False)
class SmoothedCEVField(CoefficientField):
    """f(x) = theta (eps^2 + x^2)^(p/2) with 0 < p <= 1 and eps > 0."""

    theta: float
    eps: float
    p: float

    family_id = "cev"

    def __post_init__(self):
        if not (0 < self.p <= 1) or self.eps <= 0 or self.theta < 0:
            raise ValueError("cev needs theta >= 0, eps > 0 and 0 < p <= 1")

    @property
    def params(self):
        return (self.theta, self.eps, self.p)

    def value(self, t, x):
        x = np.asarray(x, dtype=float)
        return self.theta * (self.eps**2 + x * x) ** (0.5 * self.p)

    @property
    def lip_exact(self):
        th, e2, p = self.theta, self.eps**2, self.p
        if p == 1:
            return th
        u = e2 / (1 - p)  # maximiser of x^2 for |f'|
        return th * p * math.sqrt(u) * (e2 + u) ** (0.5 * p - 1)

    @property
    def a_exact(self):
        # (f^2)'' = 2 p th^2 (e2+v)^(p-2) (e2 + (2p-1) v), v = x^2
        th, e2, p = self.theta, self.eps**2, self.p
        if p >= 0.5:
            return 0.0
        v = 3 * e2 / (1 - 2 * p)
        q = (e2 + v) ** (p - 2) * (e2 + (2 * p - 1) * v)
        return max(0.0, -p * th**2 * q)

    @property
    def c_exact(self):
        return self.lip_exact

    @property
    def convex(self):
        return self.p == 1


@dataclass(frozen=True, repr=False, eq=False)
class TabulatedField(CoefficientField):
    """Piecewise-linear interpolation of node values, extended linearly.

    ``smooth=True`` marks a table sampled from a smooth function (for example a
    mollified coefficient); kinks between nodes are then discretisation
    artefacts and the semi-convexity constant is estimated on the grid.
    """

    xs: np.ndarray
    vs: np.ndarray
    smooth: bool = False

    family_id = "tabulated"

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        vs = np.asarray(self.vs, dtype=float)
        if xs.ndim != 1 or xs.shape != vs.shape or xs.size < 2:
            raise ValueError("tabulated field needs matching 1-D node and value arrays")
        if np.any(np.diff(xs) <= 0):
            raise ValueError("tabulated nodes must be strictly increasing")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "vs", vs)
        slopes = np.diff(vs) / np.diff(xs)
        object.__setattr__(self, "_slopes", slopes)

    @classmethod
    def from_params(cls, params, smooth=False):
        arr = np.asarray(params, dtype=float)
        if arr.size % 2 or arr.size < 4:
            raise ValueError("tabulated params are [x0, v0, x1, v1, ...] with >= 2 nodes")
        return cls(arr[0::2].copy(), arr[1::2].copy(), smooth)

    @property
    def params(self):
        out = np.empty(2 * self.xs.size)
        out[0::2] = self.xs
        out[1::2] = self.vs
        return tuple(out.tolist())

    def value(self, t, x):
        xa = np.asarray(x, dtype=float)
        xs, vs, sl = self.xs, self.vs, self._slopes
        out = np.interp(xa, xs, vs)
        out = np.where(xa < xs[0], vs[0] + sl[0] * (xa - xs[0]), out)
        out = np.where(xa > xs[-1], vs[-1] + sl[-1] * (xa - xs[-1]), out)
        return out if np.ndim(x) else float(out)

    @property
    def lip_exact(self):
        return float(np.max(np.abs(self._slopes)))

    @property
    def a_exact(self):
        if self.smooth:
            return None
        # f^2 is piecewise convex; a concave kink makes the constant infinite
        jumps = self.vs[1:-1] * np.diff(self._slopes)
        return math.inf if np.any(jumps < -1e-14) else 0.0

    @property
    def c_exact(self):
        return max(0.0, -float(np.min(self._slopes)))

    @property
    def convex(self):
        return bool(np.all(np.diff(self._slopes) >= -1e-14))


class CallableField(CoefficientField):
    """Wrap a vectorised python function f(t, x).

    Time integrals fall back to 16-node Gauss-Legendre quadrature per step;
    square-root clamps at zero are counted in ``clamp_count``.
    """

    family_id = "callable"
    has_closed_time_integrals = False

    def __init__(self, func: Callable, lip: float | None = None, time_constant: bool = False,
                 convex: bool | None = None, name: str = "callable"):
        self.func = func
        self.lip_exact = lip
        self.time_constant = time_constant
        self.convex = convex
        self.name = name
        self.clamp_count = 0

    def value(self, t, x):
        return np.asarray(self.func(t, np.asarray(x, dtype=float)), dtype=float)

    def step_rms(self, t0, t1, x):
        if self.time_constant:
            return np.abs(self.value(t0, x))
        ms = self._quad_mean(t0, t1, x, square=True)
        self.clamp_count += int(np.count_nonzero(ms < 0))
        return np.sqrt(np.maximum(ms, 0.0))

    def to_config(self):
        raise TypeError("callable fields cannot be written to a config file")

    def __repr__(self):
        return f"CallableField({self.name})"


def _tent(params):
    if params:
        raise ValueError("tent takes no parameters")
    return TentField()


def _one(cls):
    def build(params):
        if len(params) != 1:
            raise ValueError(f"{cls.family_id} takes exactly one parameter")
        return cls(float(params[0]))
    return build


def _cev(params):
    if len(params) != 3:
        raise ValueError("cev params are [theta, eps, p]")
    return SmoothedCEVField(*map(float, params))


FAMILIES: dict[str, Callable[[Sequence[float]], CoefficientField]] = {
    "constant": _one(ConstantField),
    "affine": AffineField.from_params,
    "proportional": _one(ProportionalField),
    "hyperbola": _one(HyperbolaField),
    "tent": _tent,
    "cev": _cev,
    "tabulated": TabulatedField.from_params,
}


def make_field(family_id: str, params=()) -> CoefficientField:
    try:
        builder = FAMILIES[family_id]
    except KeyError:
        raise ValueError(f"unknown coefficient family {family_id!r}; known: {sorted(FAMILIES)}") from None
    return builder(list(params))


# ---------------------------------------------------------------------------
# initial laws


@dataclass(frozen=True)
class Dirac:
    x0: float

    def quantile(self, u):
        return np.full(np.shape(u), float(self.x0))

    def atoms(self):
        return np.array([self.x0], float), np.array([1.0])

    @property
    def mean(self):
        return float(self.x0)

    def to_config(self):
        return {"law": "dirac", "x0": float(self.x0)}


@dataclass(frozen=True)
class TwoPoint:
    """alpha * delta_x + (1 - alpha) * delta_y."""

    x: float
    y: float
    alpha: float = 0.5

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")

    def quantile(self, u):
        lo, hi = (self.x, self.y) if self.x <= self.y else (self.y, self.x)
        p_lo = self.alpha if self.x <= self.y else 1 - self.alpha
        return np.where(np.asarray(u) < p_lo, lo, hi).astype(float)

    def atoms(self):
        return np.array([self.x, self.y], float), np.array([self.alpha, 1 - self.alpha])

    @property
    def mean(self):
        return self.alpha * self.x + (1 - self.alpha) * self.y

    def to_config(self):
        return {"law": "two_point", "x": float(self.x), "y": float(self.y), "alpha": float(self.alpha)}


@dataclass(frozen=True, eq=False)
class SampleTable:
    """Uniform law over a finite table of values."""

    values: np.ndarray

    def __post_init__(self):
        v = np.sort(np.asarray(self.values, dtype=float).ravel())
        if v.size == 0:
            raise ValueError("empty sample table")
        object.__setattr__(self, "values", v)

    def quantile(self, u):
        idx = np.minimum((np.asarray(u) * self.values.size).astype(np.int64), self.values.size - 1)
        return self.values[idx]

    def atoms(self):
        return self.values, np.full(self.values.size, 1.0 / self.values.size)

    @property
    def mean(self):
        return float(self.values.mean())

    def to_config(self):
        return {"law": "table", "values": self.values.tolist()}


def make_initial(cfg) -> Dirac | TwoPoint | SampleTable:
    if isinstance(cfg, (int, float)):
        return Dirac(float(cfg))
    law = cfg.get("law", "dirac")
    if law == "dirac":
        return Dirac(float(cfg["x0"]))
    if law == "two_point":
        return TwoPoint(float(cfg["x"]), float(cfg["y"]), float(cfg.get("alpha", 0.5)))
    if law == "table":
        return SampleTable(np.asarray(cfg["values"], float))
    raise ValueError(f"unknown initial law {law!r}")


@dataclass(frozen=True)
class SdeSpec:
    drift: CoefficientField
    diffusion: CoefficientField
    T: float = 1.0
    initial: object = field(default_factory=lambda: Dirac(0.0))

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("horizon must be positive")

    def diffusion_negative_points(self, grid: "SpatialGrid", times=None):
        """Grid points (t, x) where the diffusion coefficient is negative."""
        times = default_times(self.T) if times is None else times
        xs = grid.nodes
        bad = []
        for t in times:
            v = self.diffusion.value(t, xs)
            for i in np.flatnonzero(v < 0):
                bad.append((float(t), float(xs[i])))
        return bad

    def to_config(self):
        return {
            "drift": self.drift.to_config(),
            "diffusion": self.diffusion.to_config(),
            "T": float(self.T),
            "initial": self.initial.to_config(),
        }


# ---------------------------------------------------------------------------
# grids and constant estimation


@dataclass(frozen=True)
class SpatialGrid:
    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if self.n < 2 or not self.hi > self.lo:
            raise InvalidGridError("a spatial grid needs hi > lo and at least 2 nodes")

    @classmethod
    def from_step(cls, lo, hi, dx):
        n = int(round((hi - lo) / dx)) + 1
        return cls(float(lo), float(hi), n)

    @property
    def dx(self):
        return (self.hi - self.lo) / (self.n - 1)

    @property
    def nodes(self):
        return np.linspace(self.lo, self.hi, self.n)

    def describe(self):
        return {"lo": self.lo, "hi": self.hi, "n": self.n, "dx": self.dx}


def default_grid() -> SpatialGrid:
    return SpatialGrid.from_step(-20.0, 20.0, 1e-3)


def default_times(T: float, count: int = 64) -> np.ndarray:
    return np.arange(count + 1) * (T / count)


def _eval_checked(f: CoefficientField, t, xs):
    v = np.asarray(f.value(t, xs), dtype=float)
    bad = ~np.isfinite(v)
    if bad.any():
        raise EvaluationError(t, xs[np.argmax(bad)], f.family_id)
    return v


def _times_for(f: CoefficientField, times):
    ts = np.atleast_1d(np.asarray(times, dtype=float))
    if ts.size == 0:
        raise ValueError("times must be nonempty")
    if f.time_constant:
        return ts[:1]
    return ts


def grid_lipschitz(f: CoefficientField, grid: SpatialGrid, times) -> float:
    """Largest adjacent-node difference quotient over the grid and times."""
    xs = grid.nodes
    best = 0.0
    for t in _times_for(f, times):
        v = _eval_checked(f, t, xs)
        best = max(best, float(np.max(np.abs(np.diff(v)))) / grid.dx)
    return best


def estimate_lipschitz(f: CoefficientField, grid: SpatialGrid, times) -> float:
    """Lipschitz constant in x: the exact value when the family declares one,
    otherwise the grid difference-quotient estimate."""
    est = grid_lipschitz(f, grid, times)
    return float(f.lip_exact) if f.lip_exact is not None else est


def estimate_a_sigma(diffusion: CoefficientField, grid: SpatialGrid, times) -> float:
    """Least a >= 0 such that sigma^2 + a x^2 has nonnegative second differences on the grid."""
    if grid.n < 3:
        raise InvalidGridError("semi-convexity estimate needs at least 3 nodes")
    xs = grid.nodes
    worst = 0.0
    for t in _times_for(diffusion, times):
        v = _eval_checked(diffusion, t, xs)
        sq = v * v
        d2 = (sq[2:] - 2 * sq[1:-1] + sq[:-2]) / grid.dx**2
        worst = min(worst, float(d2.min()))
    return max(0.0, -worst) / 2.0


def estimate_c_b(drift: CoefficientField, grid: SpatialGrid, times) -> float:
    """Least c >= 0 making b(t, .) + c x non-decreasing on the grid."""
    if grid.n < 3:
        raise InvalidGridError("monotonicity estimate needs at least 3 nodes")
    xs = grid.nodes
    worst = 0.0
    for t in _times_for(drift, times):
        v = _eval_checked(drift, t, xs)
        worst = min(worst, float(np.min(np.diff(v))) / grid.dx)
    return max(0.0, -worst)


@dataclass(frozen=True)
class ConstantsReport:
    lip: float
    sup_at_zero: float
    a_sigma: float
    c_b: float
    c_sigma: float
    m_min: float
    h_bar: float
    grid_descriptor: dict
    T: float = 1.0
    lip_grid: float = float("nan")
    a_sigma_grid: float = float("nan")
    c_b_grid: float = float("nan")
    lip_drift: float = float("nan")

    def as_dict(self):
        return {
            "lip": self.lip,
            "lip_grid": self.lip_grid,
            "lip_drift": self.lip_drift,
            "sup_at_zero": self.sup_at_zero,
            "a_sigma": self.a_sigma,
            "a_sigma_grid": self.a_sigma_grid,
            "c_b": self.c_b,
            "c_b_grid": self.c_b_grid,
            "c_sigma": self.c_sigma,
            "m_min": self.m_min,
            "h_bar": self.h_bar,
            "T": self.T,
            "grid": dict(self.grid_descriptor),
        }


@dataclass(frozen=True)
class SchemeBounds:
    m_min: float
    h_bar: float
    s_default: float


def h_bar_formula(c_drift: float, c_diff: float) -> float:
    """Largest admissible step ((sqrt(c + 2 cb) - sqrt(c)) / (2 cb))^2.

    The cb -> 0 limit of the inner ratio is 1 / (2 sqrt(c)), with 1/0 = inf.
    """
    if c_drift < 0 or c_diff < 0:
        raise ValueError("constants must be nonnegative")
    if c_drift == 0:
        if c_diff == 0:
            return math.inf
        inner = 1.0 / (2.0 * math.sqrt(c_diff))
    else:
        inner = (math.sqrt(c_diff + 2 * c_drift) - math.sqrt(c_diff)) / (2 * c_drift)
    return inner * inner


def m_min_formula(c_drift: float, c_diff: float, T: float) -> float:
    """Least step count (2 cb / (sqrt(c + 2 cb) - sqrt(c)))^2 T; 4 c T when cb = 0."""
    if c_drift < 0 or c_diff < 0:
        raise ValueError("constants must be nonnegative")
    if c_drift == 0:
        return 4.0 * c_diff * T
    ratio = 2 * c_drift / (math.sqrt(c_diff + 2 * c_drift) - math.sqrt(c_diff))
    return ratio * ratio * T


def derive_constants(drift: CoefficientField, diffusion: CoefficientField, T: float,
                     grid: SpatialGrid | None = None, times=None) -> ConstantsReport:
    """Regularity constants of a drift/diffusion pair.

    Exact family constants are used when declared; grid estimates are kept
    alongside for cross-checking.
    """
    grid = default_grid() if grid is None else grid
    times = default_times(T) if times is None else times
    lip_grid = grid_lipschitz(diffusion, grid, times)
    lip = float(diffusion.lip_exact) if diffusion.lip_exact is not None else lip_grid
    a_grid = estimate_a_sigma(diffusion, grid, times)
    a = float(diffusion.a_exact) if diffusion.a_exact is not None else a_grid
    cb_grid = estimate_c_b(drift, grid, times)
    cb = float(drift.c_exact) if drift.c_exact is not None else cb_grid
    lip_b = float(drift.lip_exact) if drift.lip_exact is not None else grid_lipschitz(drift, grid, times)
    c_sigma = a + lip * lip
    if math.isinf(c_sigma):
        h_bar, m_min = 0.0, math.inf
    else:
        h_bar = h_bar_formula(cb, c_sigma)
        m_min = m_min_formula(cb, c_sigma, T)
    sup0 = max(drift.sup_at_zero(times), diffusion.sup_at_zero(times))
    return ConstantsReport(
        lip=lip, sup_at_zero=sup0, a_sigma=a, c_b=cb, c_sigma=c_sigma, m_min=m_min, h_bar=h_bar,
        grid_descriptor=grid.describe(), T=float(T), lip_grid=lip_grid, a_sigma_grid=a_grid,
        c_b_grid=cb_grid, lip_drift=lip_b,
    )


def derive_scheme_bounds(constants: ConstantsReport, T: float, m: int) -> SchemeBounds:
    if m < 1:
        raise ValueError("m must be a positive integer")
    if not (math.isfinite(constants.c_sigma) and math.isfinite(constants.c_b)):
        raise ValueError("scheme bounds need finite constants")
    h_bar = h_bar_formula(constants.c_b, constants.c_sigma)
    m_min = m_min_formula(constants.c_b, constants.c_sigma, T)
    lip = constants.lip
    s = math.inf if lip == 0 else math.sqrt(m) / (2.0 * lip * math.sqrt(T))
    return SchemeBounds(m_min=m_min, h_bar=h_bar, s_default=s)
