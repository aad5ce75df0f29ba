"""Closed-form reference solutions."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


def heat_quadratic(t, x, d, T):
    """``|x|^2 + d (T - t)``: solution for ``mu = 0``, ``sigma = I``, ``g = |x|^2``, ``f = 0``.

    ``x`` may be a point ``(d,)`` or a batch ``(k, d)``.
    """
    x = np.asarray(x, dtype=float)
    out = (x * x).sum(axis=-1) + d * (T - np.asarray(t, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def linear_f_duhamel(c, t, x, base_expectation, T=1.0):
    """``exp(c (T - t)) * E[g(X_T)]``: solution when ``f = c v``.

    ``base_expectation`` is ``E[g(X^{t,x}_T)]``, a number or a callable
    ``(t, x) -> value``.
    """
    base = base_expectation(t, x) if callable(base_expectation) else base_expectation
    return np.exp(c * (T - np.asarray(t, dtype=float))) * base


def gaussian_exponential_moment(a, t, x, T):
    """``exp(<a, x> + |a|^2 (T - t) / 2)``: ``mu = 0``, ``sigma = I``, ``g = exp(<a, x>)``, ``f = 0``."""
    a = np.asarray(a, dtype=float).reshape(-1)
    x = np.asarray(x, dtype=float)
    out = np.exp(x @ a + 0.5 * float(a @ a) * (T - np.asarray(t, dtype=float)))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class OracleCase:
    """A problem configuration together with its exact solution."""

    name: str
    config: dict
    solution: Callable
    notes: str = ""


def heat_case(d=1, T=1.0):
    return OracleCase(
        "heat-quadratic", {"family": "brownian", "d": d, "T": T, "f": "0", "g": "norm2", "L": 1.0},
        lambda t, x: heat_quadratic(t, x, d, T),
        "f = 0; E|x + W_(T-t)|^2 = |x|^2 + d (T - t)")


def linear_case(c=1.0, d=1, T=1.0):
    return OracleCase(
        "linear-f", {"family": "brownian", "d": d, "T": T, "f": f"{float(c)!r}*v", "g": "norm2",
                     "L": abs(float(c)) or 1.0},
        lambda t, x: linear_f_duhamel(c, t, x, lambda s, y: heat_quadratic(s, y, d, T), T),
        "f = c v; u = exp(c (T - t)) (|x|^2 + d (T - t))")


def exponential_case(a, T=1.0):
    a = [float(v) for v in a]
    d = len(a)
    g = " + ".join(f"{v!r}*x{i + 1}" for i, v in enumerate(a))
    return OracleCase(
        "gaussian-exponential", {"family": "brownian", "d": d, "T": T, "f": "0", "g": f"exp({g})", "L": 1.0},
        lambda t, x: gaussian_exponential_moment(a, t, x, T),
        "f = 0; Gaussian moment generating function")


def deterministic_linear_value(t, T=1.0, c=1.0, g=1.0):
    """``g exp(c (T - t))``: ``mu = sigma = 0``, ``f = c v``, constant ``g``."""
    return g * math.exp(c * (T - t))


def picard_polynomial(t, n, T=1.0):
    """``sum_{k<n} (T-t)^k / k!``, the n-th Picard iterate of ``u' = -u``, ``u(T) = 1``."""
    return sum((T - t) ** k / math.factorial(k) for k in range(n))


CASES = {
    "heat-quadratic": heat_case,
    "linear-f": linear_case,
    "gaussian-exponential": exponential_case,
}
