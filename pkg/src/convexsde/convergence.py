"""Convergence diagnostics for the truncated Euler scheme.

The strong error is measured against exact geometric Brownian motion built
from the same Gaussian increments, so each path pair is coupled.  Rates are
reported as fitted log-log slopes with standard errors; no constants are
estimated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coefficients import ConstantField, Dirac, ProportionalField, SdeSpec
from .euler import TIME_INTEGRATED, NoisePanel, SchemeConfig, run_chunks
from .reference import gaussian_tail

__all__ = [
    "RateReport",
    "w1_empirical",
    "threshold_for",
    "strong_error_rate",
    "terminal_w1_study",
    "truncation_gap_study",
    "truncation_event_rate",
    "fit_slope",
]


@dataclass
class RateReport:
    m_list: list
    errors: list
    stderrs: list
    slope: float
    slope_stderr: float
    intercept: float
    residuals: list
    meta: dict = field(default_factory=dict)

    def as_dict(self):
        return {"m_list": self.m_list, "errors": self.errors, "stderrs": self.stderrs,
                "slope": self.slope, "slope_stderr": self.slope_stderr,
                "intercept": self.intercept, "residuals": self.residuals, "meta": self.meta}

    def csv_rows(self):
        cols = ["m", "error", "stderr", "residual"]
        rows = [{"m": m, "error": e, "stderr": s, "residual": r}
                for m, e, s, r in zip(self.m_list, self.errors, self.stderrs, self.residuals)]
        return cols, rows

    def gnuplot(self) -> str:
        lines = ["# m error stderr"]
        lines += [f"{m} {e:.17g} {s:.17g}" for m, e, s in zip(self.m_list, self.errors, self.stderrs)]
        return "\n".join(lines) + "\n"


def w1_empirical(a, b, p: int = 1) -> float:
    """W_p between two equal-weight empirical laws on the line (sorted pairing)."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size != b.size:
        raise ValueError("samples must have equal size")
    if a.size == 0:
        return 0.0
    d = np.abs(a - b)
    if p == 1:
        return float(d.mean())
    return float(np.mean(d**p) ** (1.0 / p))


def threshold_for(policy, m: int, lip: float, T: float) -> float:
    """Resolve a threshold policy: "auto" (the admissible default), "inf",
    "log" (2 sqrt(ln m)), a number, or a callable of m."""
    if callable(policy):
        return float(policy(m))
    if policy == "auto":
        return math.inf if lip == 0 else math.sqrt(m) / (2 * lip * math.sqrt(T))
    if policy == "inf":
        return math.inf
    if policy == "log":
        return 2 * math.sqrt(math.log(m))
    return float(policy)


def fit_slope(m_list, errors, stderrs):
    """Weighted least squares of log(error) on log(m); weights from the delta method."""
    x = np.log(np.asarray(m_list, dtype=float))
    y = np.log(np.asarray(errors, dtype=float))
    se = np.asarray(stderrs, dtype=float) / np.asarray(errors, dtype=float)
    w = 1.0 / np.maximum(se, 1e-300) ** 2 if np.all(se > 0) else np.ones_like(x)
    xm = (w * x).sum() / w.sum()
    ym = (w * y).sum() / w.sum()
    sxx = (w * (x - xm) ** 2).sum()
    slope = (w * (x - xm) * (y - ym)).sum() / sxx
    intercept = ym - slope * xm
    resid = y - (intercept + slope * x)
    if np.all(se > 0):
        slope_se = math.sqrt(1.0 / sxx)
        # inflate when the residuals are larger than the MC error alone explains
        dof = max(x.size - 2, 1)
        chi2 = float((w * resid**2).sum()) / dof
        slope_se *= math.sqrt(max(1.0, chi2))
    else:
        slope_se = math.nan
    return float(slope), float(slope_se), float(intercept), resid.tolist()


def _gbm_spec(theta, x0, T):
    return SdeSpec(ConstantField(0.0), ProportionalField(theta), T, Dirac(x0))


def _exact_from_noise(G, x0, theta, T):
    m = G.shape[0]
    h = T / m
    t = np.arange(m + 1) * h
    W = np.zeros((m + 1, G.shape[1]))
    np.cumsum(math.sqrt(h) * G, axis=0, out=W[1:])
    return x0 * np.exp(theta * W - 0.5 * theta**2 * t[:, None])


def _mean_se(parts):
    n = sum(p[0] for p in parts)
    s1 = sum(p[1] for p in parts)
    s2 = sum(p[2] for p in parts)
    mean = s1 / n
    var = max(s2 / n - mean * mean, 0.0) * n / max(n - 1, 1)
    return mean, math.sqrt(var / n)


def strong_error_rate(theta: float, x0: float = 1.0, T: float = 1.0, m_list=(16, 32, 64, 128, 256, 512, 1024),
                      N: int = 100_000, seed: int = 0, threshold="auto",
                      variant: str = TIME_INTEGRATED, threads: int | None = None) -> RateReport:
    """Mean over paths of max_k |exact GBM - scheme| on the scheme grid, per m."""
    m_list = [int(m) for m in m_list]
    if len(m_list) < 4:
        raise ValueError("need at least 4 values of m")
    ratios = {m_list[i + 1] / m_list[i] for i in range(len(m_list) - 1)}
    if len(ratios) != 1 or min(ratios) <= 1:
        raise ValueError("m_list must be an increasing geometric sequence")
    spec = _gbm_spec(theta, x0, T)
    errors, ses, thresholds = [], [], []
    for m in m_list:
        s = threshold_for(threshold, m, abs(theta), T)
        thresholds.append(s)
        config = SchemeConfig(m, variant, s, T)
        noise = NoisePanel(N, m, seed)

        def consumer(a, b, panels, noise=noise, m=m):
            ex = _exact_from_noise(noise.step_major(a, b), x0, theta, T)
            e = np.max(np.abs(ex - panels[0]), axis=0)
            return (e.size, float(e.sum()), float((e * e).sum()))

        mean, se = _mean_se(run_chunks([spec], config, noise, consumer, threads=threads))
        errors.append(mean)
        ses.append(se)
    meta = {"theta": theta, "x0": x0, "T": T, "N": N, "seed": seed, "variant": variant,
            "thresholds": ["inf" if math.isinf(s) else s for s in thresholds]}
    if all(e == 0 for e in errors):
        return RateReport(m_list, errors, ses, 0.0, 0.0, 0.0, [0.0] * len(m_list), meta)
    slope, sse, icpt, resid = fit_slope(m_list, errors, ses)
    return RateReport(m_list, errors, ses, slope, sse, icpt, resid, meta)


def terminal_w1_study(theta: float, x0: float, T: float, m_list, N: int, seed: int, threshold,
                      exact_seed: int | None = None) -> dict:
    """Terminal-marginal W1 between the scheme and exact GBM drawn from independent noise.

    The exact sample uses its own seed so that the statistic measures the
    distance between laws rather than a pathwise coupling.
    """
    spec = _gbm_spec(theta, x0, T)
    exact_seed = seed + 1 if exact_seed is None else exact_seed
    zt = NoisePanel(N, 1, exact_seed).step_major(0, N)[0]
    exact = x0 * np.exp(theta * math.sqrt(T) * zt - 0.5 * theta**2 * T)
    out = []
    for m in m_list:
        s = threshold_for(threshold, m, abs(theta), T)
        config = SchemeConfig(int(m), TIME_INTEGRATED, s, T)
        noise = NoisePanel(N, int(m), seed)
        term = np.concatenate(run_chunks([spec], config, noise, lambda a, b, p: p[0][-1], threads=1))
        out.append({"m": int(m), "s": "inf" if math.isinf(s) else s, "w1": w1_empirical(term, exact)})
    return {"rows": out, "N": N}


def truncation_gap_study(theta: float, x0: float, T: float, m_list, N: int, seed: int,
                         threshold="auto") -> dict:
    """Mean coupled gap max_k |untruncated - truncated| for each m."""
    spec = _gbm_spec(theta, x0, T)
    rows = []
    for m in m_list:
        s = threshold_for(threshold, m, abs(theta), T)
        cfg_t = SchemeConfig(int(m), TIME_INTEGRATED, s, T)
        cfg_u = SchemeConfig(int(m), TIME_INTEGRATED, math.inf, T)
        noise = NoisePanel(N, int(m), seed)
        a_ = run_chunks([spec], cfg_t, noise, lambda a, b, p: p[0], threads=1)
        b_ = run_chunks([spec], cfg_u, noise, lambda a, b, p: p[0], threads=1)
        gap = np.concatenate([np.max(np.abs(u - v), axis=0) for u, v in zip(a_, b_)])
        rows.append({"m": int(m), "s": "inf" if math.isinf(s) else s, "mean_gap": float(gap.mean()),
                     "stderr": float(gap.std(ddof=1) / math.sqrt(gap.size)) if gap.size > 1 else 0.0})
    return {"rows": rows, "N": N}


def truncation_event_rate(noise: NoisePanel, s: float, spec: SdeSpec | None = None,
                          threads: int | None = None) -> dict:
    """Fraction of paths with some |G| > s, against the union bound m P(|G| > s).

    Also checks that on paths without an exceedance the truncated and
    untruncated schemes agree bitwise.
    """
    m = noise.m
    spec = _gbm_spec(0.2, 1.0, 1.0) if spec is None else spec
    cfg_t = SchemeConfig(m, TIME_INTEGRATED, s, spec.T)
    cfg_u = SchemeConfig(m, TIME_INTEGRATED, math.inf, spec.T)

    def consumer(a, b, panels):
        G = noise.step_major(a, b)
        hit = np.any(np.abs(G) > s, axis=0)
        return hit, panels[0]

    rt = run_chunks([spec], cfg_t, noise, consumer, threads=threads)
    ru = run_chunks([spec], cfg_u, noise, lambda a, b, p: p[0], threads=threads)
    hits = 0
    identical = True
    for (hit, pt), pu in zip(rt, ru):
        hits += int(hit.sum())
        keep = ~hit
        identical &= bool(np.array_equal(pt[:, keep], pu[:, keep]))
    N = noise.N
    p_tail = gaussian_tail(s) if math.isfinite(s) else 0.0
    bound = min(1.0, m * p_tail)
    stderr = math.sqrt(bound * (1 - bound) / N)
    observed = hits / N
    return {"observed": observed, "exceeding_paths": hits, "N": N, "m": m,
            "s": "inf" if math.isinf(s) else s, "bound": bound, "binomial_stderr": stderr,
            "within_bound": observed <= bound + 3 * stderr, "bitwise_identical_elsewhere": identical}
