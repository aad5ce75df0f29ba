"""Tensor time-space grids and piecewise-linear grid functions."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from ._fallback import interpolate

MAX_GRID_DIM = 3


@dataclass(frozen=True)
class GridSpec:
    """Uniform knots ``0 = tau_0 < ... < tau_K = T`` times a box of uniform axes.

    Parameters
    ----------
    T : float
    K : int
        Number of time intervals (``K + 1`` time knots).
    lo, hi : sequence of float
        Spatial box per coordinate.
    n : sequence of int
        Knots per coordinate (at least 2).
    """

    T: float
    K: int
    lo: tuple
    hi: tuple
    n: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(a) for a in self.lo))
        object.__setattr__(self, "hi", tuple(float(b) for b in self.hi))
        object.__setattr__(self, "n", tuple(int(k) for k in self.n))
        if not (len(self.lo) == len(self.hi) == len(self.n)) or not self.n:
            raise ValueError("grid lo, hi and n must have one entry per coordinate")
        if len(self.n) > MAX_GRID_DIM:
            raise ValueError(f"grid solver supports d <= {MAX_GRID_DIM}; use the nested estimator")
        if self.K < 1 or self.T <= 0:
            raise ValueError("grid needs K >= 1 and T > 0")
        for a, b, k in zip(self.lo, self.hi, self.n):
            if not a < b or k < 2:
                raise ValueError("each grid axis needs lo < hi and at least 2 knots")

    @property
    def d(self):
        return len(self.n)

    @property
    def times(self):
        return np.array([k * (self.T / self.K) if k < self.K else self.T for k in range(self.K + 1)])

    @property
    def axes(self):
        return [_axis(a, b, k) for a, b, k in zip(self.lo, self.hi, self.n)]

    @property
    def steps(self):
        return np.array([(b - a) / (k - 1) for a, b, k in zip(self.lo, self.hi, self.n)])

    @property
    def n_space(self):
        return int(np.prod(self.n))

    def space_points(self):
        """All spatial knots in C order, shape ``(prod(n), d)``."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)


def _axis(a, b, k):
    h = (b - a) / (k - 1)
    ax = a + h * np.arange(k)
    ax[-1] = b
    return ax


class GridFunction:
    """Values on a :class:`GridSpec` with linear-in-time, multilinear-in-space
    interpolation.  Queries outside the box are clamped to its surface.

    ``values`` has shape ``(K+1, n_1, ..., n_d)``.  Instances are treated as
    immutable: the array is made read-only.
    """

    __slots__ = ("spec", "values")

    def __init__(self, spec: GridSpec, values):
        values = np.array(values, dtype=float)
        shape = (spec.K + 1,) + spec.n
        if values.shape != shape:
            raise ValueError(f"values must have shape {shape}, got {values.shape}")
        if not np.isfinite(values).all():
            raise ValueError("grid function values must be finite")
        values.setflags(write=False)
        self.spec = spec
        self.values = values

    @classmethod
    def zeros(cls, spec):
        return cls(spec, np.zeros((spec.K + 1,) + spec.n))

    @classmethod
    def from_function(cls, spec, fn):
        """Sample ``fn(t, x)`` (vectorized over ``x`` of shape ``(k, d)``) at the knots."""
        pts = spec.space_points()
        rows = [np.broadcast_to(np.asarray(fn(t, pts), dtype=float), (pts.shape[0],)) for t in spec.times]
        return cls(spec, np.stack(rows).reshape((spec.K + 1,) + spec.n))

    def with_values(self, values):
        return GridFunction(self.spec, values)

    def nodes(self):
        """``(t, x)`` of every node in C order: shapes ``(N,)`` and ``(N, d)``."""
        pts = self.spec.space_points()
        t = np.repeat(self.spec.times, pts.shape[0])
        return t, np.tile(pts, (self.spec.K + 1, 1))

    def flat(self):
        return self.values.reshape(-1)

    def __call__(self, t, x):
        """Interpolate at one time ``t`` and points ``x`` of shape ``(k, d)`` or ``(d,)``."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xs = x.reshape(-1, self.spec.d)
        s = self.spec
        out = interpolate(self.flat()[None, :], float(t), xs, s.K, s.T / s.K,
                          np.array(s.lo), s.steps, np.array(s.n, dtype=np.int64))[0]
        return float(out[0]) if single else out

    def __sub__(self, other):
        _same_grid(self, other)
        return GridFunction(self.spec, self.values - other.values)

    def __add__(self, other):
        _same_grid(self, other)
        return GridFunction(self.spec, self.values + other.values)

    def to_csv(self, path=None, fmt="%.17g"):
        """Write one row per node with columns ``t,x1..xd,u``.

        Returns the CSV text when ``path`` is None.
        """
        t, x = self.nodes()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"x{i + 1}" for i in range(self.spec.d)] + ["u"])
        for ti, xi, ui in zip(t, x, self.flat()):
            w.writerow([fmt % ti] + [fmt % c for c in xi] + [fmt % ui])
        text = buf.getvalue()
        if path is None:
            return text
        with open(path, "w", newline="") as fh:
            fh.write(text)
        return None

    @classmethod
    def from_csv(cls, spec, path_or_text):
        """Read values written by :meth:`to_csv` back onto ``spec``."""
        text = path_or_text
        if "\n" not in text:
            with open(path_or_text) as fh:
                text = fh.read()
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        if header[-1] != "u" or len(header) != spec.d + 2:
            raise ValueError("CSV header does not match the grid dimension")
        u = np.array([float(r[-1]) for r in body])
        return cls(spec, u.reshape((spec.K + 1,) + spec.n))


def _same_grid(a, b):
    if a.spec != b.spec:
        raise ValueError("grid functions live on different grids")

