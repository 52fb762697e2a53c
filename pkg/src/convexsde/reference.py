"""Closed-form prices used as independent oracles for the simulators."""
from __future__ import annotations

import math

from scipy.special import ndtr

__all__ = ["black_scholes_call", "black_scholes_put", "bachelier_call", "gaussian_tail"]


def black_scholes_call(S: float, K: float, vol: float, T: float, r: float = 0.0) -> float:
    if vol <= 0 or T <= 0:
        return max(S - K * math.exp(-r * T), 0.0)
    sd = vol * math.sqrt(T)
    d1 = (math.log(S / K) + (r + 0.5 * vol * vol) * T) / sd
    d2 = d1 - sd
    return float(S * ndtr(d1) - K * math.exp(-r * T) * ndtr(d2))


def black_scholes_put(S: float, K: float, vol: float, T: float, r: float = 0.0) -> float:
    return black_scholes_call(S, K, vol, T, r) - S + K * math.exp(-r * T)


def bachelier_call(x0: float, K: float, vol: float, T: float) -> float:
    """E (x0 + vol W_T - K)^+ for Brownian motion W."""
    sd = vol * math.sqrt(T)
    if sd == 0:
        return max(x0 - K, 0.0)
    d = (x0 - K) / sd
    pdf = math.exp(-0.5 * d * d) / math.sqrt(2 * math.pi)
    return float((x0 - K) * ndtr(d) + sd * pdf)


def gaussian_tail(s: float) -> float:
    """P(|G| > s) for a standard normal G."""
    return float(math.erfc(s / math.sqrt(2)))
