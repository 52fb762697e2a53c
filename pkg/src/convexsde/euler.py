"""Truncated Euler schemes on a uniform grid, driven by counter-based noise.

Two variants are provided.  ``TIME_INTEGRATED`` freezes the spatial argument
and integrates the coefficients over each step; ``POINT_FROZEN`` evaluates them
at the left end point.  Both are written as

    x_{k+1} = x_k + h * b_k(x_k) + sqrt(h) * sig_k(x_k) * Z_{k+1},

where b_k, sig_k are the step's effective coefficients and Z = G 1{|G| <= s}.
With s = inf the truncation is the identity, so the untruncated scheme is the
same code path on the same noise.
"""
from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .coefficients import SdeSpec

__all__ = [
    "TIME_INTEGRATED",
    "POINT_FROZEN",
    "SchemeConfig",
    "NoisePanel",
    "SamplePaths",
    "draw_truncated",
    "truncate",
    "effective_coefficients",
    "step",
    "simulate_batch",
    "simulate_coupled",
    "run_chunks",
    "interpolate",
    "interpolated_sup",
    "exact_gbm_paths",
    "initial_uniforms",
    "default_threads",
]

TIME_INTEGRATED = "time_integrated"
POINT_FROZEN = "point_frozen"
_VARIANTS = (TIME_INTEGRATED, POINT_FROZEN)

BLOCK = 4096  # paths per RNG block
CHUNK = 16384  # paths per simulation task (a multiple of BLOCK)

# stream tags: which quantity a Philox key produces
TAG_GAUSS = 0
TAG_INIT_X = 1
TAG_INIT_Y = 2
TAG_GAUSS_AUDIT = 3


def default_threads() -> int:
    env = os.environ.get("CONVEXSDE_THREADS")
    if env:
        return max(1, int(env))
    return max(1, min(8, os.cpu_count() or 1))


@dataclass(frozen=True)
class SchemeConfig:
    m: int
    variant: str = TIME_INTEGRATED
    s: float = math.inf
    T: float = 1.0

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ValueError("m must be a positive integer")
        if self.variant not in _VARIANTS:
            raise ValueError(f"variant must be one of {_VARIANTS}")
        if not self.s >= 0:
            raise ValueError("threshold must be nonnegative")
        if not self.T > 0:
            raise ValueError("horizon must be positive")

    @property
    def h(self):
        return self.T / self.m

    def time(self, k):
        return k * self.T / self.m

    def to_config(self):
        return {"m": int(self.m), "variant": self.variant, "s": _jsonable(self.s), "T": float(self.T)}


def _jsonable(x):
    return "inf" if math.isinf(x) else float(x)


def _philox(seed: int, tag: int, block: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, (tag << 40) | block], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class NoisePanel:
    """Standard normal draws G[n][k] for n < N, k < m.

    Values are generated on demand in blocks of ``BLOCK`` paths.  Each block is
    keyed by (seed, stream, block index) and drawn step-major, so G[n][k] is a
    function of (seed, n, k) only: it does not depend on N, on m, or on the
    order in which blocks are produced.
    """

    generator_id = "philox4x64-block4096-stepmajor"

    def __init__(self, N: int, m: int, seed: int, stream: int = TAG_GAUSS, values=None):
        if N < 1 or m < 1:
            raise ValueError("noise panel needs N >= 1 and m >= 1")
        self.N = int(N)
        self.m = int(m)
        self.seed = int(seed)
        self.stream = int(stream)
        self._explicit = None
        if values is not None:
            arr = np.asarray(values, dtype=float)
            if arr.shape != (self.N, self.m):
                raise ValueError("explicit noise must have shape (N, m)")
            self._explicit = arr

    @classmethod
    def from_array(cls, values, seed: int = 0):
        arr = np.atleast_2d(np.asarray(values, dtype=float))
        return cls(arr.shape[0], arr.shape[1], seed, values=arr)

    def _block(self, j: int) -> np.ndarray:
        return _philox(self.seed, self.stream, j).standard_normal((self.m, BLOCK))

    def step_major(self, start: int, stop: int) -> np.ndarray:
        """Draws for paths [start, stop) as an (m, stop - start) array."""
        if not 0 <= start < stop <= self.N:
            raise IndexError("path range outside panel")
        if self._explicit is not None:
            return np.ascontiguousarray(self._explicit[start:stop].T)
        out = np.empty((self.m, stop - start))
        j0, j1 = start // BLOCK, (stop - 1) // BLOCK
        for j in range(j0, j1 + 1):
            b = self._block(j)
            lo = max(start, j * BLOCK)
            hi = min(stop, (j + 1) * BLOCK)
            out[:, lo - start:hi - start] = b[:, lo - j * BLOCK:hi - j * BLOCK]
        return out

    def values(self) -> np.ndarray:
        """Materialise the whole (N, m) panel."""
        return self.step_major(0, self.N).T.copy()

    def audit_twin(self) -> "NoisePanel":
        """An independent panel of the same shape (for independent-noise audits)."""
        return NoisePanel(self.N, self.m, self.seed, stream=TAG_GAUSS_AUDIT)


def initial_uniforms(seed: int, start: int, stop: int, tag: int = TAG_INIT_X) -> np.ndarray:
    """Uniforms feeding the initial-law quantile maps, keyed like the noise."""
    out = np.empty(stop - start)
    j0, j1 = start // BLOCK, (stop - 1) // BLOCK
    for j in range(j0, j1 + 1):
        b = _philox(seed, tag, j).random(BLOCK)
        lo = max(start, j * BLOCK)
        hi = min(stop, (j + 1) * BLOCK)
        out[lo - start:hi - start] = b[lo - j * BLOCK:hi - j * BLOCK]
    return out


def draw_truncated(g, s):
    """g if |g| <= s else 0."""
    if np.ndim(g) == 0:
        return float(g) if abs(g) <= s else 0.0
    return truncate(np.asarray(g, dtype=float), s)


def truncate(g: np.ndarray, s: float) -> np.ndarray:
    if math.isinf(s):
        return g
    return np.where(np.abs(g) <= s, g, 0.0)


def effective_coefficients(spec: SdeSpec, config: SchemeConfig, k: int):
    """(b_k, sig_k): vectorised effective drift and diffusion on step k."""
    t0 = config.time(k)
    t1 = config.time(k + 1)
    drift, diff = spec.drift, spec.diffusion
    if config.variant == POINT_FROZEN:
        return (lambda x: drift.value(t0, x)), (lambda x: diff.value(t0, x))
    return (lambda x: drift.step_mean(t0, t1, x)), (lambda x: diff.step_rms(t0, t1, x))


def step(x, k: int, spec: SdeSpec, config: SchemeConfig, z):
    """One scheme step from x at t_k with (already truncated) noise z."""
    b, sig = effective_coefficients(spec, config, k)
    h = config.h
    xa = np.asarray(x, dtype=float)
    out = xa + h * b(xa) + math.sqrt(h) * sig(xa) * z
    return float(out) if np.ndim(out) == 0 else out


def _advance(x0: np.ndarray, spec: SdeSpec, config: SchemeConfig, G: np.ndarray) -> np.ndarray:
    """Run the scheme; G is (m, n) step-major.  Returns (m + 1, n)."""
    m = config.m
    h = config.h
    sqh = math.sqrt(h)
    out = np.empty((m + 1, x0.size))
    out[0] = x0
    for k in range(m):
        b, sig = effective_coefficients(spec, config, k)
        x = out[k]
        z = truncate(G[k], config.s)
        out[k + 1] = x + h * b(x) + sqh * sig(x) * z
    return out


@dataclass(frozen=True, eq=False)
class SamplePaths:
    """X[n][k] at t_k = k T / m, with the configuration and seed that produced it."""

    values: np.ndarray
    config: SchemeConfig
    seed: int
    generator_id: str = NoisePanel.generator_id

    def __post_init__(self):
        if self.values.shape[1] != self.config.m + 1:
            raise ValueError("path panel must have m + 1 columns")

    @property
    def N(self):
        return self.values.shape[0]

    @property
    def terminal(self):
        return self.values[:, -1]

    @property
    def times(self):
        return np.arange(self.config.m + 1) * (self.config.T / self.config.m)

    _HEADER = struct.Struct("<8sQQdQ16sd")
    _MAGIC = b"CSDEPATH"

    def to_bytes(self) -> bytes:
        c = self.config
        head = self._HEADER.pack(self._MAGIC, self.N, c.m, c.T, self.seed & 0xFFFFFFFFFFFFFFFF,
                                 c.variant.encode().ljust(16, b"\0"), c.s)
        return head + np.ascontiguousarray(self.values, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SamplePaths":
        magic, N, m, T, seed, variant, s = cls._HEADER.unpack_from(data)
        if magic != cls._MAGIC:
            raise ValueError("not a sample-path dump")
        vals = np.frombuffer(data, dtype="<f8", offset=cls._HEADER.size).reshape(N, m + 1).copy()
        cfg = SchemeConfig(m=m, variant=variant.rstrip(b"\0").decode(), s=s, T=T)
        return cls(vals, cfg, seed)

    def write_binary(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_csv(self, path):
        header = ",".join(["path"] + [f"t{k}" for k in range(self.config.m + 1)])
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for n, row in enumerate(self.values):
                fh.write(str(n) + "," + ",".join(repr(float(v)) for v in row) + "\n")


def _chunk_bounds(N: int, chunk: int = CHUNK):
    return [(a, min(a + chunk, N)) for a in range(0, N, chunk)]


def _initial(spec: SdeSpec, seed: int, start: int, stop: int, tag: int) -> np.ndarray:
    from .coefficients import Dirac

    if isinstance(spec.initial, Dirac):
        return np.full(stop - start, float(spec.initial.x0))
    return np.asarray(spec.initial.quantile(initial_uniforms(seed, start, stop, tag)), dtype=float)


def run_chunks(specs: Sequence[SdeSpec], config: SchemeConfig, noise: NoisePanel,
               consumer: Callable[[int, int, list], object], couple_initial: bool = True,
               independent_noise: bool = False, threads: int | None = None,
               chunk: int = CHUNK) -> list:
    """Simulate every spec on each path chunk and hand the panels to ``consumer``.

    ``consumer(start, stop, panels)`` receives one (m + 1, n) step-major array
    per spec and returns a per-chunk result.  Results come back in chunk
    order, so any reduction done by the caller is independent of ``threads``.
    With ``independent_noise`` the second spec uses an independent noise
    panel and initial-law stream (audit mode).
    """
    if noise.m != config.m:
        raise ValueError(f"noise has {noise.m} steps but the scheme has {config.m}")
    T = specs[0].T
    for sp in specs:
        if abs(sp.T - T) > 0 or abs(config.T - T) > 1e-15 * max(1.0, T):
            raise ValueError("horizon mismatch between specs and scheme")
    audit = noise.audit_twin() if independent_noise else None

    def task(bounds):
        a, b = bounds
        G = noise.step_major(a, b)
        panels = []
        for i, sp in enumerate(specs):
            tag = TAG_INIT_X if (i == 0 or couple_initial) else TAG_INIT_Y
            g = G
            if i > 0 and audit is not None:
                g = audit.step_major(a, b)
                tag = TAG_INIT_Y
            x0 = _initial(sp, noise.seed, a, b, tag)
            panels.append(_advance(x0, sp, config, g))
        return consumer(a, b, panels)

    bounds = _chunk_bounds(noise.N, chunk)
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(bounds) == 1:
        return [task(bd) for bd in bounds]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(task, bounds))


def simulate_batch(spec: SdeSpec, config: SchemeConfig, noise: NoisePanel,
                   threads: int | None = None) -> SamplePaths:
    parts = run_chunks([spec], config, noise, lambda a, b, p: p[0].T, threads=threads)
    return SamplePaths(np.concatenate(parts, axis=0), config, noise.seed)


def simulate_coupled(specX: SdeSpec, specY: SdeSpec, config: SchemeConfig, noise: NoisePanel,
                     couple_initial: bool = True, threads: int | None = None,
                     independent_noise: bool = False):
    """Both specs on the same noise (comonotone initial draws by default)."""
    if specX.T != specY.T:
        raise ValueError("horizon mismatch between the two specs")
    parts = run_chunks([specX, specY], config, noise, lambda a, b, p: (p[0].T, p[1].T),
                       couple_initial=couple_initial, threads=threads,
                       independent_noise=independent_noise)
    X = np.concatenate([p[0] for p in parts], axis=0)
    Y = np.concatenate([p[1] for p in parts], axis=0)
    return SamplePaths(X, config, noise.seed), SamplePaths(Y, config, noise.seed)


def interpolate(values, T: float, t):
    """Piecewise-linear interpolation of grid values v_0..v_m on [0, T]."""
    v = np.asarray(values, dtype=float)
    ta = np.asarray(t, dtype=float)
    if np.any(ta < 0) or np.any(ta > T):
        raise ValueError("t outside [0, T]")
    m = v.size - 1
    grid = np.arange(m + 1) * (T / m)
    out = np.interp(ta, grid, v)
    return float(out) if np.ndim(out) == 0 else out


def interpolated_sup(values, axis=-1):
    """Sup norm of the interpolated path, which is the max of |values|."""
    return np.max(np.abs(values), axis=axis)


def exact_gbm_paths(x0: float, theta: float, noise: NoisePanel, T: float) -> SamplePaths:
    """x0 exp(theta W_t - theta^2 t / 2) with W built from the panel's increments."""
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    m = noise.m
    h = T / m
    t = np.arange(m + 1) * h

    def consumer(a, b, _):
        G = noise.step_major(a, b)
        W = np.zeros((m + 1, b - a))
        np.cumsum(math.sqrt(h) * G, axis=0, out=W[1:])
        return (x0 * np.exp(theta * W - 0.5 * theta**2 * t[:, None])).T

    parts = [consumer(a, b, None) for a, b in _chunk_bounds(noise.N)]
    cfg = SchemeConfig(m=m, variant=TIME_INTEGRATED, s=math.inf, T=T)
    return SamplePaths(np.concatenate(parts, axis=0), cfg, noise.seed, generator_id="exact-gbm")
