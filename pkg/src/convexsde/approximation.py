"""Mollified diffusion coefficients with linear tails that keep 0 <= sigma_n <= theta_n.

sigma_n is rho_n * sigma on [-n, n], where rho_n(x) = n rho(n x) and rho is the
normalised bump C exp(-1 / (1 - u^2)) on (-1, 1).  Outside [-n, n] it is
continued linearly: to the right with slope max(0, sigma_n'(n)), to the left
with slope min(0, sigma_n'(-n)).  theta_n uses the same construction, except
that its tail slopes also take the max (right) or min (left) with sigma_n's
slopes, which keeps theta_n above sigma_n on the tails.

Piecewise-linear coefficients (constants, affine, proportional, tent and
tabulated fields with few nodes) are convolved exactly through the
cumulative bump moments R0(v) = int_{-1}^v rho, R1(v) = int_{-1}^v u rho.
Other fields use a normalised 64-node Gauss-Legendre rule on the bump.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .coefficients import (AffineField, CoefficientField, ConstantField, ProportionalField,
                           SpatialGrid, TabulatedField, TentField)

__all__ = [
    "MollifierKernel",
    "SmoothedPair",
    "DominationError",
    "build_mollified_pair",
    "mollify",
    "approximation_error",
]

_BUMP_MASS = 0.44399381616807937  # int_{-1}^{1} exp(-1 / (1 - u^2)) du
_TABLE_CELLS = 4096
_GL10_X, _GL10_W = np.polynomial.legendre.leggauss(10)


def _bump(u):
    u = np.asarray(u, dtype=float)
    inside = np.abs(u) < 1
    out = np.zeros_like(u)
    ui = u[inside]
    out[inside] = np.exp(-1.0 / (1.0 - ui * ui)) / _BUMP_MASS
    return out


def _bump_prime(u):
    u = np.asarray(u, dtype=float)
    inside = np.abs(u) < 1
    out = np.zeros_like(u)
    ui = u[inside]
    out[inside] = -2 * ui / (1 - ui * ui) ** 2 * np.exp(-1.0 / (1.0 - ui * ui)) / _BUMP_MASS
    return out


class MollifierKernel:
    """Normalised bump rho and its scaled versions rho_n(x) = n rho(n x)."""

    def __init__(self, n_nodes: int = 64):
        x, w = np.polynomial.legendre.leggauss(n_nodes)
        rw = w * _bump(x)
        self.nodes = x
        self.weights = rw / rw.sum()  # constants are reproduced exactly
        self.dweights = w * _bump_prime(x)
        # cumulative moments on a fine table, each cell integrated by 10-point Gauss-Legendre
        edges = np.linspace(-1.0, 1.0, _TABLE_CELLS + 1)
        self._edges = edges
        self._R0, self._R1 = self._cumulative(edges)
        self.normalisation = float(self._R0[-1])

    @staticmethod
    def _cell_moments(a, b):
        mid = 0.5 * (a + b)[..., None]
        half = 0.5 * (b - a)[..., None]
        u = mid + half * _GL10_X
        r = _bump(u) * half * _GL10_W
        return r.sum(-1), (u * r).sum(-1)

    def _cumulative(self, edges):
        m0, m1 = self._cell_moments(edges[:-1], edges[1:])
        return np.concatenate([[0.0], np.cumsum(m0)]), np.concatenate([[0.0], np.cumsum(m1)])

    def moments(self, v):
        """(R0(v), R1(v)) for v clipped to [-1, 1]."""
        v = np.clip(np.asarray(v, dtype=float), -1.0, 1.0)
        j = np.minimum(((v + 1.0) / 2.0 * _TABLE_CELLS).astype(np.int64), _TABLE_CELLS - 1)
        a = self._edges[j]
        p0, p1 = self._cell_moments(a, v)
        return self._R0[j] + p0, self._R1[j] + p1

    def density(self, x, n: int):
        return n * _bump(n * np.asarray(x, dtype=float))


_KERNEL: MollifierKernel | None = None


def _kernel() -> MollifierKernel:
    global _KERNEL
    if _KERNEL is None:
        _KERNEL = MollifierKernel()
    return _KERNEL


class DominationError(ValueError):
    def __init__(self, witnesses):
        self.witnesses = witnesses
        head = ", ".join(f"{w[2]} at x={w[0]:g} ({w[1]:g})" for w in witnesses[:5])
        super().__init__(f"{len(witnesses)} grid point(s) violate 0 <= sigma <= theta: {head}")


def _hinges(f: CoefficientField, t: float):
    """(alpha, beta, kinks, jumps) with f(y) = alpha + beta y + sum jumps (y - kinks)^+,
    or None when f is not piecewise linear with a manageable number of kinks."""
    if isinstance(f, ConstantField):
        return float(f.c), 0.0, np.zeros(0), np.zeros(0)
    if isinstance(f, AffineField):
        _, lam, mu = f._piece(t)
        return float(lam), float(mu), np.zeros(0), np.zeros(0)
    if isinstance(f, ProportionalField):
        return 0.0, float(f.theta), np.zeros(0), np.zeros(0)
    if isinstance(f, TentField):
        # value 1 and slope 0 on the far left
        return 1.0, 0.0, np.array([-1.0, 0.0, 1.0]), np.array([1.0, -2.0, 1.0])
    if isinstance(f, TabulatedField) and f.xs.size <= 1000:
        sl = np.diff(f.vs) / np.diff(f.xs)
        beta = float(sl[0])
        alpha = float(f.vs[0] - beta * f.xs[0])
        jumps = np.diff(sl)
        keep = jumps != 0
        return alpha, beta, f.xs[1:-1][keep], jumps[keep]
    return None


def mollify(f: CoefficientField, n: int, x: np.ndarray, t: float = 0.0):
    """(rho_n * f)(x) and its derivative at the points x."""
    x = np.asarray(x, dtype=float)
    k = _kernel()
    hz = _hinges(f, t)
    if hz is not None:
        alpha, beta, kinks, jumps = hz
        val = alpha + beta * x
        der = np.full_like(x, beta)
        for p, kap in zip(kinks, jumps):
            near = np.abs(x - p) < 1.0 / n
            right = x - p >= 1.0 / n
            val = val + np.where(right, kap * (x - p), 0.0)
            der = der + np.where(right, kap, 0.0)
            if near.any():
                v = n * (x[near] - p)
                R0, R1 = k.moments(v)
                val[near] += kap * ((x[near] - p) * R0 - R1 / n)
                der[near] += kap * R0
        return val, der
    # smooth route: u are bump nodes, f evaluated at x - u / n
    pts = x[:, None] - k.nodes[None, :] / n
    fv = np.asarray(f.value(t, pts), dtype=float)
    val = fv @ k.weights
    der = n * (fv @ k.dweights)
    return val, der


@dataclass(frozen=True, eq=False)
class SmoothedPair:
    sigma_n: TabulatedField
    theta_n: TabulatedField
    n: int
    error_bound: float  # Lip(sigma) / n
    slopes: dict
    t: float = 0.0

    def to_config(self):
        return {"sigma_n": self.sigma_n.to_config(), "theta_n": self.theta_n.to_config(), "n": self.n}


def build_mollified_pair(sigma: CoefficientField, theta: CoefficientField, n: int, t: float = 0.0,
                         dx: float = 1e-3, check_dx: float = 1e-2) -> SmoothedPair:
    """Mollified pair (sigma_n, theta_n) at time t, tabulated on [-n-2, n+2]."""
    if n < 1 or int(n) != n:
        raise ValueError("n must be a positive integer")
    chk = SpatialGrid.from_step(-n - 1.0, n + 1.0, check_dx).nodes
    sv = np.asarray(sigma.value(t, chk), dtype=float)
    tv = np.asarray(theta.value(t, chk), dtype=float)
    wit = [(float(x), float(a), "sigma < 0") for x, a in zip(chk, sv) if a < 0][:5]
    wit += [(float(x), float(a - b), "sigma > theta") for x, a, b in zip(chk, sv, tv) if a > b][:5]
    if wit:
        raise DominationError(wit)

    xs = SpatialGrid.from_step(-n - 2.0, n + 2.0, dx).nodes
    inner = np.abs(xs) <= n
    s_in, _ = mollify(sigma, n, xs[inner], t)
    t_in, _ = mollify(theta, n, xs[inner], t)
    (s_l, s_r), (ds_l, ds_r) = mollify(sigma, n, np.array([-float(n), float(n)]), t)
    (t_l, t_r), (dt_l, dt_r) = mollify(theta, n, np.array([-float(n), float(n)]), t)
    sr = max(0.0, ds_r)
    sl = min(0.0, ds_l)
    tr = max(0.0, ds_r, dt_r)
    tl = min(0.0, ds_l, dt_l)

    def assemble(v_in, v_l, v_r, left, right):
        out = np.empty_like(xs)
        out[inner] = v_in
        lo = xs < -n
        hi = xs > n
        out[lo] = v_l + left * (xs[lo] + n)
        out[hi] = v_r + right * (xs[hi] - n)
        return out

    sig_vals = assemble(s_in, s_l, s_r, sl, sr)
    th_vals = assemble(t_in, t_l, t_r, tl, tr)
    lip = sigma.lip_exact if sigma.lip_exact is not None else float("nan")
    return SmoothedPair(
        TabulatedField(xs, sig_vals, smooth=True),
        TabulatedField(xs, th_vals, smooth=True),
        int(n), float(lip) / n,
        {"sigma_left": sl, "sigma_right": sr, "theta_left": tl, "theta_right": tr}, float(t))


def approximation_error(pair: SmoothedPair, sigma: CoefficientField, theta: CoefficientField,
                        grid: SpatialGrid) -> dict:
    """Sup-norm errors of the mollified pair on a grid inside [-n, n]."""
    if grid.lo < -pair.n - 1e-12 or grid.hi > pair.n + 1e-12:
        raise ValueError("error grid must lie inside [-n, n]")
    xs = grid.nodes
    t = pair.t
    es = np.max(np.abs(pair.sigma_n.value(t, xs) - sigma.value(t, xs)))
    et = np.max(np.abs(pair.theta_n.value(t, xs) - theta.value(t, xs)))
    return {"sup_err_sigma": float(es), "sup_err_theta": float(et)}
