"""Monotone I-spline and B-spline bases.

I-splines follow Ramsay (1988): each I-spline is the integral of a normalized
M-spline, so it rises from 0 at the lower boundary to 1 at the upper one. A
nonnegative combination of I-splines is therefore a nondecreasing function
that vanishes at the lower boundary, which is what we need for a cumulative
baseline hazard with ``Lambda(0) = 0``.

Evaluation uses the identity that an I-spline of degree ``d`` equals a tail
sum of degree-``d`` B-splines on the same interior knots,

    I_j(t) = sum_{m >= j} B_m(t),

with the leading, identically-one tail sum dropped. The B-spline values come
from :func:`scipy.interpolate.BSpline.design_matrix`.

Conventions: ``degree`` is the polynomial degree of the I-splines (3 = cubic),
``k = len(interior_knots) + degree`` I-spline functions, and
``len(interior_knots) + degree + 1`` B-spline functions.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

__all__ = [
    "SplineBasis",
    "KnotWarning",
    "make_basis",
    "make_index_basis",
    "eval_ispline",
    "eval_bspline",
    "ispline_matrix",
    "bspline_matrix",
]

UPPER_PAD = 1e-9


class KnotWarning(UserWarning):
    """Requested knots collapsed because of ties in the data."""


@dataclass(frozen=True)
class SplineBasis:
    """Knot sequence plus degree.

    Attributes
    ----------
    degree : int
    interior_knots : tuple of float
        Sorted, strictly inside ``boundary``.
    boundary : (float, float)
    notes : tuple of str
        Warning records produced while the basis was built (e.g. collapsed
        knots); never an error.
    """

    degree: int
    interior_knots: tuple
    boundary: tuple
    notes: tuple = field(default=(), compare=False)

    def __post_init__(self):
        lo, hi = (float(b) for b in self.boundary)
        if not lo < hi:
            raise ValueError(f"boundary must satisfy lo < hi, got {self.boundary}")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        knots = tuple(float(v) for v in self.interior_knots)
        if any(not lo < v < hi for v in knots):
            raise ValueError("interior knots must lie strictly inside the boundary")
        if any(b <= a for a, b in zip(knots, knots[1:])):
            raise ValueError("interior knots must be strictly increasing")
        object.__setattr__(self, "boundary", (lo, hi))
        object.__setattr__(self, "interior_knots", knots)

    @property
    def lo(self) -> float:
        return self.boundary[0]

    @property
    def hi(self) -> float:
        return self.boundary[1]

    @property
    def k(self) -> int:
        """Number of I-spline basis functions."""
        return len(self.interior_knots) + self.degree

    @property
    def m(self) -> int:
        """Number of B-spline basis functions."""
        return len(self.interior_knots) + self.degree + 1

    @property
    def knot_vector(self) -> np.ndarray:
        """Clamped knot vector for the degree-``degree`` B-splines."""
        d = self.degree
        return np.r_[[self.lo] * (d + 1), self.interior_knots, [self.hi] * (d + 1)]

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "interior_knots": list(self.interior_knots),
            "boundary": list(self.boundary),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplineBasis":
        return cls(int(d["degree"]), tuple(d["interior_knots"]), tuple(d["boundary"]))


def _place_knots(values, n_knots, placement, lo, hi):
    if placement == "quantile":
        probs = np.arange(1, n_knots + 1) / (n_knots + 1)
        cand = np.quantile(values, probs)
    elif placement == "even":
        cand = np.linspace(lo, hi, n_knots + 2)[1:-1]
    else:
        raise ValueError(f"unknown knot placement {placement!r}; use 'quantile' or 'even'")
    cand = cand[(cand > lo) & (cand < hi)]
    return np.unique(cand)


def make_basis(times, degree: int = 3, n_knots: int = 5, placement: str = "quantile") -> SplineBasis:
    """Build an I-spline basis on ``[0, max(times)(1 + 1e-9)]``.

    Parameters
    ----------
    times : array_like
        Finite observation times (typically all finite, positive censoring
        endpoints).
    degree : int
        I-spline degree, one of 1..4.
    n_knots : int
        Requested number of interior knots. Ties in ``times`` may reduce the
        number actually placed; a :class:`KnotWarning` is emitted and the
        event is recorded in ``basis.notes``.
    placement : {"quantile", "even"}
    """
    times = np.asarray(times, dtype=float).ravel()
    if times.size == 0:
        raise ValueError("times must be nonempty")
    if degree not in (1, 2, 3, 4):
        raise ValueError("degree must be one of 1, 2, 3, 4")
    if n_knots < 2:
        raise ValueError("n_knots must be >= 2")
    if np.any(~np.isfinite(times)) or np.any(times < 0):
        raise ValueError("times must be finite and nonnegative")
    hi = float(times.max()) * (1.0 + UPPER_PAD)
    if hi <= 0:
        raise ValueError("at least one positive time is required")
    knots = _place_knots(times, n_knots, placement, 0.0, hi)
    notes = ()
    if knots.size < n_knots:
        msg = f"requested {n_knots} interior knots, placed {knots.size} after removing ties"
        warnings.warn(msg, KnotWarning, stacklevel=2)
        notes = (msg,)
    return SplineBasis(degree, tuple(knots), (0.0, hi), notes)


def make_index_basis(u, degree: int = 3, n_knots: int = 3, placement: str = "quantile") -> SplineBasis:
    """B-spline basis spanning ``[min(u), max(u)]`` for a single-index link."""
    u = np.asarray(u, dtype=float).ravel()
    lo, hi = float(u.min()), float(u.max())
    if not hi > lo:
        hi = lo + 1.0
    knots = _place_knots(u, n_knots, placement, lo, hi) if n_knots > 0 else np.empty(0)
    return SplineBasis(degree, tuple(knots), (lo, hi))


def bspline_matrix(basis: SplineBasis, u) -> np.ndarray:
    """B-spline design matrix, shape ``(len(u), m)``; ``u`` is clamped to the boundary."""
    u = np.clip(np.atleast_1d(np.asarray(u, dtype=float)), basis.lo, basis.hi)
    if np.any(~np.isfinite(u)):
        raise ValueError("B-spline argument must be finite")
    return BSpline.design_matrix(u, basis.knot_vector, basis.degree).toarray()


def ispline_matrix(basis: SplineBasis, t) -> np.ndarray:
    """I-spline design matrix, shape ``(len(t), k)``.

    Values are 0 for ``t <= lo`` and 1 for ``t >= hi``.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(~np.isfinite(t)):
        raise ValueError("I-spline argument must be finite")
    if np.any(t < 0):
        raise ValueError("I-spline argument must be nonnegative")
    B = bspline_matrix(basis, t)
    # reverse cumulative sum, dropping the constant column
    tail = np.cumsum(B[:, ::-1], axis=1)[:, ::-1]
    out = np.clip(tail[:, 1:], 0.0, 1.0)
    out[t <= basis.lo] = 0.0
    out[t >= basis.hi] = 1.0
    return out


def eval_ispline(basis: SplineBasis, t) -> np.ndarray:
    """I-spline values at a single time ``t >= 0``, length ``k``."""
    t = float(t)
    if not np.isfinite(t) or t < 0:
        raise ValueError(f"I-spline argument must be finite and nonnegative, got {t}")
    return ispline_matrix(basis, [t])[0]


def eval_bspline(basis: SplineBasis, u) -> np.ndarray:
    """B-spline values at a single point, length ``m``; clamped outside the boundary."""
    u = float(u)
    if not np.isfinite(u):
        raise ValueError("B-spline argument must be finite")
    return bspline_matrix(basis, [u])[0]
