"""Deterministic one-step kernels of the truncated Euler scheme on a grid.

The law of Z = G 1{|G| <= s} is a normal density restricted to [-s, s] plus an
atom of mass P(|G| > s) at zero.  A value function is stored on a uniform grid
and read back through a convexity- and monotonicity-preserving piecewise
quadratic interpolant (or plain linear interpolation).  One kernel step

    (P f)(x) = E f(x + h b(x) + sqrt(h) sig(x) Z)

is evaluated either exactly, by integrating each quadratic piece against the
truncated density in closed form, or by Gauss-Legendre quadrature in z.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, erfc, ndtr

from .coefficients import SdeSpec, SpatialGrid
from .euler import SchemeConfig, effective_coefficients

__all__ = [
    "TruncatedGaussianMeasure",
    "build_measure",
    "truncated_abs_mean",
    "truncated_second_moment",
    "GridFunction",
    "KernelOperator",
    "one_step_map",
    "kernel_step",
    "backward_induct_terminal",
    "multi_marginal_induct",
    "grid_convexity_defect",
    "tensor_convexity_defect",
    "kernel_ordering_gap",
    "AssumptionViolation",
    "UnsupportedDimensionError",
    "oracle_grid",
]

Z_CAP = 12.0  # normal mass beyond 12 is below 1e-32
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class UnsupportedDimensionError(ValueError):
    pass


class AssumptionViolation(ValueError):
    """Coefficient domination fails; ``witnesses`` lists (t, x, what)."""

    def __init__(self, witnesses):
        self.witnesses = witnesses
        head = ", ".join(f"{w[2]} at t={w[0]:g}, x={w[1]:g}" for w in witnesses[:5])
        super().__init__(f"{len(witnesses)} domination violation(s): {head}")


def truncated_abs_mean(s: float) -> float:
    """E|Z| for Z = G 1{|G| <= s}."""
    if s == 0:
        return 0.0
    if math.isinf(s):
        return math.sqrt(2 / math.pi)
    return math.sqrt(2 / math.pi) * -math.expm1(-0.5 * s * s)


def truncated_second_moment(s: float) -> float:
    """E Z^2 = erf(s / sqrt 2) - 2 s phi(s)."""
    if math.isinf(s):
        return 1.0
    return float(erf(s / _SQRT2)) - 2 * s * _INV_SQRT_2PI * math.exp(-0.5 * s * s)


@dataclass(frozen=True, eq=False)
class TruncatedGaussianMeasure:
    s: float
    nodes: np.ndarray
    weights: np.ndarray
    atom_mass: float

    def moment(self, fn):
        return self.atom_mass * fn(0.0) + float(np.sum(self.weights * fn(self.nodes)))

    @property
    def total_mass(self):
        return self.atom_mass + float(self.weights.sum())


def build_measure(s: float, n_nodes: int = 128) -> TruncatedGaussianMeasure:
    """Gauss-Legendre rule on [-s, s] against the normal density plus the atom at 0.

    The rule is built on [0, min(s, 12)] and mirrored, so nodes are exactly
    symmetric and odd moments vanish to rounding.
    """
    if not s >= 0:
        raise ValueError("threshold must be nonnegative")
    if n_nodes < 2 or n_nodes % 2:
        raise ValueError("n_nodes must be an even integer >= 2")
    p0 = float(erfc(s / _SQRT2)) if not math.isinf(s) else 0.0
    if s == 0:
        return TruncatedGaussianMeasure(0.0, np.zeros(0), np.zeros(0), 1.0)
    L = min(s, Z_CAP)
    u, w = np.polynomial.legendre.leggauss(n_nodes // 2)
    z = 0.5 * L * (u + 1.0)
    wz = 0.5 * L * w * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    nodes = np.concatenate([-z[::-1], z])
    weights = np.concatenate([wz[::-1], wz])
    return TruncatedGaussianMeasure(float(s), nodes, weights, p0)


def _minmod(a, b):
    return np.where(a * b > 0, np.sign(a) * np.minimum(np.abs(a), np.abs(b)), 0.0)


@dataclass(eq=False)
class GridFunction:
    """Values on a uniform grid; the last axis is the spatial axis.

    Leading axes (if any) hold further grid coordinates of a tensor function,
    all on the same grid.  ``interpolation`` is "quadratic" (cell curvature
    is the minmod of the neighbouring node curvatures, which keeps convex and
    monotone data convex and monotone and reproduces quadratics) or "linear".
    Outside the grid the interpolant continues linearly with its end slope,
    clamped to ``lip`` when one is given.
    """

    grid: SpatialGrid
    values: np.ndarray
    interpolation: str = "quadratic"
    lip: float | None = None
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[-1] != self.grid.n:
            raise ValueError("values do not match the grid")
        if self.interpolation not in ("quadratic", "linear"):
            raise ValueError("interpolation must be 'quadratic' or 'linear'")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid function has non-finite values")

    @classmethod
    def from_function(cls, grid: SpatialGrid, fn, d: int = 1, **kw):
        xs = grid.nodes
        if d == 1:
            return cls(grid, fn(xs), **kw)
        mesh = np.meshgrid(*([xs] * d), indexing="ij")
        return cls(grid, fn(*mesh), **kw)

    @property
    def x(self):
        return self.grid.nodes

    @property
    def ndim(self):
        return self.values.ndim

    def with_values(self, values):
        return GridFunction(self.grid, values, self.interpolation, self.lip, list(self.warnings))

    def cell_coefficients(self):
        """(V, B, C) of shape (..., n + 1): on cell j the interpolant is
        V + B u + C u^2 with u measured from the cell's left node.  Cell 0 is
        the left tail (origin x_0), cell n the right tail (origin x_{n-1})."""
        v = self.values
        dx = self.grid.dx
        n = self.grid.n
        chord = np.diff(v, axis=-1) / dx
        if self.interpolation == "quadratic" and n >= 3:
            curv = np.diff(chord, axis=-1) / dx  # at interior nodes 1..n-2
            D = np.empty(chord.shape)
            D[..., 1:-1] = _minmod(curv[..., :-1], curv[..., 1:])
            D[..., 0] = curv[..., 0]
            D[..., -1] = curv[..., -1]
            # keep monotone end cells monotone
            lim0 = np.where(chord[..., 0] >= 0, 2 * chord[..., 0] / dx, np.inf)
            D[..., 0] = np.where(D[..., 0] > 0, np.minimum(D[..., 0], lim0), D[..., 0])
            lim1 = np.where(chord[..., -1] <= 0, -2 * chord[..., -1] / dx, np.inf)
            D[..., -1] = np.where(D[..., -1] > 0, np.minimum(D[..., -1], lim1), D[..., -1])
        else:
            D = np.zeros(chord.shape)
        lead = v.shape[:-1]
        V = np.empty(lead + (n + 1,))
        B = np.empty(lead + (n + 1,))
        C = np.zeros(lead + (n + 1,))
        V[..., 0] = v[..., 0]
        V[..., 1:n] = v[..., :-1]
        V[..., n] = v[..., -1]
        B[..., 1:n] = chord - 0.5 * D * dx
        C[..., 1:n] = 0.5 * D
        left = chord[..., 0] - 0.5 * D[..., 0] * dx
        right = chord[..., -1] + 0.5 * D[..., -1] * dx
        if self.lip is not None:
            left = np.clip(left, -self.lip, self.lip)
            right = np.clip(right, -self.lip, self.lip)
        B[..., 0] = left
        B[..., n] = right
        return V, B, C

    def _cell_index(self, y):
        g = self.grid
        j = np.floor((y - g.lo) / g.dx).astype(np.int64) + 1
        return np.clip(j, 0, g.n)

    def _origins(self):
        xs = self.grid.nodes
        return np.concatenate([[xs[0]], xs[:-1], [xs[-1]]])

    def __call__(self, y):
        """Evaluate a 1-D grid function at arbitrary points."""
        if self.values.ndim != 1:
            raise ValueError("pointwise evaluation is for 1-D grid functions")
        ya = np.asarray(y, dtype=float)
        V, B, C = self.cell_coefficients()
        j = self._cell_index(ya)
        u = ya - self._origins()[j]
        out = V[j] + B[j] * u + C[j] * u * u
        # exact values at the nodes
        xs = self.grid.nodes
        idx = np.clip(np.rint((ya - self.grid.lo) / self.grid.dx).astype(np.int64), 0, xs.size - 1)
        out = np.where(xs[idx] == ya, self.values[idx], out)
        return float(out) if np.ndim(out) == 0 else out

    def to_csv(self, path):
        if self.values.ndim != 1:
            raise ValueError("CSV export is for 1-D grid functions")
        with open(path, "w") as fh:
            fh.write("x,value\n")
            for x, v in zip(self.x, self.values):
                fh.write(f"{x!r},{v!r}\n")


def one_step_map(x, z, beta, sigma, h: float):
    """x + h beta(x) + sqrt(h) sigma(x) z; beta, sigma are callables or numbers."""
    xa = np.asarray(x, dtype=float)
    b = beta(xa) if callable(beta) else beta
    sg = sigma(xa) if callable(sigma) else sigma
    out = xa + h * b + math.sqrt(h) * sg * z
    return float(out) if np.ndim(out) == 0 else out


class KernelOperator:
    """The linear map from cell coefficients to (P f)(x_i) for one step.

    For node i the scheme lands at a_i + c_i Z with a_i = x_i + h b(x_i) and
    c_i = sqrt(h) |sig(x_i)|.  Each piece of the interpolant is integrated
    exactly against the truncated normal law, so P f is linear in (V, B, C):
    P f = N0 V + N1 B + N2 C.
    """

    def __init__(self, grid: SpatialGrid, a: np.ndarray, c: np.ndarray, s: float):
        self.grid = grid
        self.a = np.asarray(a, dtype=float)
        self.c = np.abs(np.asarray(c, dtype=float))
        self.s = float(s)
        xs = grid.nodes
        n = grid.n
        p0 = 1.0 if s == 0 else (0.0 if math.isinf(s) else float(erfc(s / _SQRT2)))
        a_ = self.a[:, None]
        c_ = self.c[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            zb = (xs[None, :] - a_) / c_
        # nodes where the noise vanishes: put the whole mass on the atom
        degenerate = (self.c == 0) | (s == 0)
        zb = np.where(np.isnan(zb), 0.0, zb)
        zb = np.clip(zb, -s, s)
        lo = np.full((n, 1), -s)
        hi = np.full((n, 1), s)
        zall = np.concatenate([lo, zb, hi], axis=1)  # boundaries of n + 1 cells
        Phi = ndtr(zall)
        phi = np.where(np.isinf(zall), 0.0, _INV_SQRT_2PI * np.exp(-0.5 * np.where(np.isinf(zall), 0.0, zall) ** 2))
        zphi = np.where(np.isinf(zall), 0.0, np.where(np.isinf(zall), 0.0, zall) * phi)
        M0 = np.diff(Phi, axis=1)
        M1 = phi[:, :-1] - phi[:, 1:]
        M2 = M0 + zphi[:, :-1] - zphi[:, 1:]
        M0[degenerate] = 0.0
        M1[degenerate] = 0.0
        M2[degenerate] = 0.0
        origins = np.concatenate([[xs[0]], xs[:-1], [xs[-1]]])
        d = a_ - origins[None, :]
        # atom at z = 0 (all the mass for degenerate rows)
        atom = np.where(degenerate, 1.0, p0)
        j = np.clip(np.floor((self.a - grid.lo) / grid.dx).astype(np.int64) + 1, 0, n)
        M0[np.arange(n), j] += atom
        self.N0 = M0
        self.N1 = d * M0 + c_ * M1
        self.N2 = d * d * M0 + 2 * d * c_ * M1 + c_ * c_ * M2
        reach = self.a + self.c * min(s, Z_CAP)
        back = self.a - self.c * min(s, Z_CAP)
        self.outside = int(np.count_nonzero((reach > xs[-1]) | (back < xs[0])))

    def apply(self, f: GridFunction) -> np.ndarray:
        V, B, C = f.cell_coefficients()
        return V @ self.N0.T + B @ self.N1.T + C @ self.N2.T


def oracle_grid(spec: SdeSpec, n: int = 2001, width: float | None = None) -> SpatialGrid:
    """Grid centred at the initial mean, 8 diffusion scales wide on each side."""
    x0 = spec.initial.mean
    if width is None:
        sig = abs(float(np.asarray(spec.diffusion.value(0.0, np.array([x0])))[0]))
        scale = max(sig * math.sqrt(spec.T), 1.0)
        width = 8.0 * scale
    return SpatialGrid(x0 - width, x0 + width, n)


def _step_arrays(spec: SdeSpec, config: SchemeConfig, k: int, xs: np.ndarray):
    b, sig = effective_coefficients(spec, config, k)
    h = config.h
    a = xs + h * np.asarray(b(xs), dtype=float)
    c = math.sqrt(h) * np.abs(np.asarray(sig(xs), dtype=float))
    return a, c


class _OperatorCache:
    """Reuse a kernel operator while the per-step arrays do not change."""

    def __init__(self, grid, s):
        self.grid = grid
        self.s = s
        self._key = None
        self._op = None

    def get(self, a, c):
        key = (a.tobytes(), c.tobytes())
        if key != self._key:
            self._op = KernelOperator(self.grid, a, c, self.s)
            self._key = key
        return self._op


def _quadrature_step(f: GridFunction, a, c, measure: TruncatedGaussianMeasure) -> np.ndarray:
    if f.values.ndim != 1:
        raise ValueError("quadrature steps are implemented for 1-D grid functions")
    out = measure.atom_mass * f(a)
    if measure.nodes.size:
        pts = a[:, None] + c[:, None] * measure.nodes[None, :]
        out = out + (f(pts) * measure.weights[None, :]).sum(axis=1)
    return out


def kernel_step(f: GridFunction, beta, sigma, h: float, measure: TruncatedGaussianMeasure,
                method: str = "exact") -> GridFunction:
    """One backward kernel step (P f)(x_i) = E f(x_i + h beta + sqrt(h) sigma Z).

    ``beta`` and ``sigma`` are the step's effective coefficients (callables or
    numbers).  ``method="exact"`` integrates the interpolant in closed form;
    ``method="quadrature"`` uses the measure's nodes and weights.
    """
    xs = f.x
    bv = beta(xs) if callable(beta) else np.full(xs.shape, float(beta))
    sv = sigma(xs) if callable(sigma) else np.full(xs.shape, float(sigma))
    a = xs + h * np.asarray(bv, dtype=float)
    c = math.sqrt(h) * np.abs(np.asarray(sv, dtype=float))
    return _apply_step(f, a, c, measure, method, None)


def _apply_step(f, a, c, measure, method, cache):
    if method == "quadrature":
        vals = _quadrature_step(f, a, c, measure)
        reach = np.count_nonzero((a + c * min(measure.s, Z_CAP) > f.grid.hi) |
                                 (a - c * min(measure.s, Z_CAP) < f.grid.lo))
    elif method == "exact":
        op = cache.get(a, c) if cache is not None else KernelOperator(f.grid, a, c, measure.s)
        vals = op.apply(f)
        reach = op.outside
    else:
        raise ValueError("method must be 'exact' or 'quadrature'")
    g = f.with_values(vals)
    if reach:
        g.warnings.append(f"{reach} node(s) reach beyond the grid; linear extrapolation used")
    return g


def backward_induct_terminal(f: GridFunction, spec: SdeSpec, config: SchemeConfig,
                             measure: TruncatedGaussianMeasure, method: str = "exact") -> GridFunction:
    """x -> E f(X_T) for the scheme started at x, by m backward kernel steps."""
    if config.m < 1:
        raise ValueError("m must be >= 1")
    if abs(measure.s - config.s) > 0 and not (math.isinf(measure.s) and math.isinf(config.s)):
        raise ValueError("measure threshold differs from the scheme threshold")
    xs = f.x
    cache = _OperatorCache(f.grid, measure.s)
    g = f
    for k in range(config.m - 1, -1, -1):
        a, c = _step_arrays(spec, config, k, xs)
        g = _apply_step(g, a, c, measure, method, cache)
    _dedupe_warnings(g)
    return g


def _dedupe_warnings(g):
    if g.warnings:
        seen = list(dict.fromkeys(g.warnings))
        g.warnings[:] = seen
        warnings.warn(seen[0], RuntimeWarning, stacklevel=3)


def multi_marginal_induct(f: GridFunction, marginals, spec: SdeSpec, config: SchemeConfig,
                          measure: TruncatedGaussianMeasure) -> GridFunction:
    """x -> E f(X_{t_k1}, ..., X_{t_kd}) for the scheme started at x.

    ``f`` is a tensor grid function whose axis i holds the i-th marginal.
    The induction runs backward from k_d, acting on the last axis, and at each
    marginal time collapses the last two axes onto their diagonal.
    """
    d = f.values.ndim
    if d > 3:
        raise UnsupportedDimensionError("tensor induction supports at most 3 marginals")
    ks = [int(k) for k in marginals]
    if len(ks) != d:
        raise ValueError("one marginal step index per tensor axis is required")
    if any(b <= a for a, b in zip(ks, ks[1:])) or ks[0] < 0 or ks[-1] > config.m:
        raise ValueError("marginal step indices must be increasing within [0, m]")
    xs = f.x
    cache = _OperatorCache(f.grid, measure.s)
    g = f
    k = ks[-1]
    for j in range(d - 1, -1, -1):
        target = ks[j - 1] if j > 0 else 0
        while k > target:
            k -= 1
            a, c = _step_arrays(spec, config, k, xs)
            g = _apply_step(g, a, c, measure, "exact", cache)
        if j > 0:
            vals = np.diagonal(g.values, axis1=-2, axis2=-1)
            g = g.with_values(np.ascontiguousarray(vals))
    _dedupe_warnings(g)
    return g


def grid_convexity_defect(g: GridFunction) -> dict:
    """Minimal second and first differences of a 1-D grid function."""
    v = g.values
    if v.ndim != 1 or v.size < 3:
        raise ValueError("need a 1-D grid function with at least 3 nodes")
    xs = g.x
    d2 = v[2:] - 2 * v[1:-1] + v[:-2]
    d1 = np.diff(v)
    i2 = int(np.argmin(d2))
    i1 = int(np.argmin(d1))
    return {
        "min_second_difference": float(d2[i2]),
        "argmin_second_difference": float(xs[i2 + 1]),
        "min_curvature": float(d2[i2]) / g.grid.dx**2,
        "min_first_difference": float(d1[i1]),
        "argmin_first_difference": float(xs[i1]),
    }


def tensor_convexity_defect(g: GridFunction) -> dict:
    """Minimal pure and mixed second differences of a tensor grid function."""
    v = g.values
    out = {"min_pure_second_difference": math.inf, "min_mixed_second_difference": math.inf,
           "min_first_difference": math.inf}
    for ax in range(v.ndim):
        d2 = np.diff(v, n=2, axis=ax)
        out["min_pure_second_difference"] = min(out["min_pure_second_difference"], float(d2.min()))
        out["min_first_difference"] = min(out["min_first_difference"], float(np.diff(v, axis=ax).min()))
        for bx in range(ax + 1, v.ndim):
            mixed = np.diff(np.diff(v, axis=ax), axis=bx)
            out["min_mixed_second_difference"] = min(out["min_mixed_second_difference"], float(mixed.min()))
    return out


def _domination_witnesses(specX: SdeSpec, specY: SdeSpec, config: SchemeConfig, xs, tol=1e-12):
    out = []
    for k in range(config.m):
        bX, sX = effective_coefficients(specX, config, k)
        bY, sY = effective_coefficients(specY, config, k)
        t = config.time(k)
        vb = np.asarray(bX(xs)) - np.asarray(bY(xs))
        sx = np.asarray(specX.diffusion.value(t, xs))
        sy = np.asarray(specY.diffusion.value(t, xs))
        for i in np.flatnonzero(vb > tol)[:3]:
            out.append((t, float(xs[i]), "b > beta"))
        for i in np.flatnonzero(sx < -tol)[:3]:
            out.append((t, float(xs[i]), "sigma < 0"))
        for i in np.flatnonzero(sx - sy > tol)[:3]:
            out.append((t, float(xs[i]), "sigma > theta"))
        if specX.drift.time_constant and specY.drift.time_constant and \
                specX.diffusion.time_constant and specY.diffusion.time_constant:
            break
    return out


def kernel_ordering_gap(f: GridFunction, specX: SdeSpec, specY: SdeSpec, config: SchemeConfig,
                        measure: TruncatedGaussianMeasure, interpolation: str = "linear",
                        override: bool = False) -> GridFunction:
    """Pointwise (P^Y f - P^X f) after full backward induction.

    Linear interpolation is the default here because it is order-preserving
    in the data, so the computed gap inherits the sign of the exact one.
    """
    if specX.T != specY.T:
        raise ValueError("horizon mismatch")
    wit = _domination_witnesses(specX, specY, config, f.x)
    if wit and not override:
        raise AssumptionViolation(wit)
    f_lin = GridFunction(f.grid, f.values, interpolation, f.lip)
    vX = backward_induct_terminal(f_lin, specX, config, measure)
    vY = backward_induct_terminal(f_lin, specY, config, measure)
    gap = vY.with_values(vY.values - vX.values)
    gap.warnings[:] = list(dict.fromkeys(vX.warnings + vY.warnings))
    return gap
