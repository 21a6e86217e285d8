"""Logarithmic transformation family and gamma-frailty quantities.

The latency survival of a susceptible subject is

    S_u(t | z) = exp[-G{exp(beta'z) Lambda(t)}],   G(x) = log(1 + r x) / r,

which is the Laplace transform of a gamma frailty with mean 1 and variance
``r``. ``r = 0`` is the proportional hazards limit ``G(x) = x`` and is handled
as its own branch rather than as a small-``r`` approximation.

All functions accept scalars or numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Transformation:
    """Member ``G(x) = log(1 + r x) / r`` of the logarithmic family.

    Parameters
    ----------
    r : float
        Frailty variance, ``r >= 0``. ``r = 0`` gives proportional hazards,
        ``r = 1`` proportional odds.
    """

    r: float = 0.0

    def __post_init__(self):
        r = float(self.r)
        if not np.isfinite(r) or r < 0:
            raise ValueError(f"transformation index r must be finite and >= 0, got {self.r!r}")
        object.__setattr__(self, "r", r)


def _as_tr(tr) -> Transformation:
    return tr if isinstance(tr, Transformation) else Transformation(float(tr))


def log1p_ratio(z):
    """``log(1 + z) / z`` for ``z >= 0``, equal to 1 at 0; stable for tiny ``z``."""
    z = np.asarray(z, dtype=float)
    small = z < 1e-8
    safe = np.where(small | np.isinf(z), 1.0, z)
    return np.where(small, 1.0 - 0.5 * z, np.where(np.isinf(z), 0.0, np.log1p(safe) / safe))


def _expm1_ratio(z):
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-8
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + 0.5 * z, np.expm1(safe) / safe)


def g_of(tr, x):
    """Evaluate ``G(x)``; ``x`` must be nonnegative."""
    tr = _as_tr(tr)
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("G is defined for x >= 0 only")
    if tr.r == 0.0:
        out = x.copy()
    else:
        with np.errstate(invalid="ignore"):
            out = np.where(np.isinf(x), np.inf, x * log1p_ratio(tr.r * x))
    return out if out.ndim else float(out)


def g_prime(tr, x):
    """Derivative ``G'(x) = 1 / (1 + r x)``."""
    tr = _as_tr(tr)
    x = np.asarray(x, dtype=float)
    out = 1.0 / (1.0 + tr.r * x)
    return out if out.ndim else float(out)


def g_inverse(tr, y):
    """Inverse of ``G``: ``(exp(r y) - 1) / r``, or ``y`` when ``r = 0``."""
    tr = _as_tr(tr)
    y = np.asarray(y, dtype=float)
    if tr.r == 0.0:
        out = y.copy()
    else:
        out = y * _expm1_ratio(tr.r * y)
    return out if out.ndim else float(out)


def frailty_mean(tr) -> float:
    """Mean of the gamma frailty, which is 1 for every ``r``."""
    _as_tr(tr)
    return 1.0


def frailty_variance(tr) -> float:
    return _as_tr(tr).r


def survival_u(tr, eta_dot_b, beta_dot_z):
    """Latency survival ``exp[-G{exp(beta'z) Lambda(t)}]``.

    Parameters
    ----------
    tr : Transformation or float
    eta_dot_b : float or ndarray
        Cumulative baseline hazard ``Lambda(t) >= 0``.
    beta_dot_z : float or ndarray
        Linear predictor of the latency covariates.
    """
    load = np.exp(np.asarray(beta_dot_z, dtype=float)) * np.asarray(eta_dot_b, dtype=float)
    out = np.exp(-np.asarray(g_of(tr, load)))
    return out if np.ndim(out) else float(out)


def laplace_tilted(tr, x):
    """``E[xi exp(-xi x)] = exp(-G(x)) G'(x) = exp(-(1 + r) G(x))``."""
    tr = _as_tr(tr)
    out = np.exp(-(1.0 + tr.r) * np.asarray(g_of(tr, x)))
    return out if np.ndim(out) else float(out)
