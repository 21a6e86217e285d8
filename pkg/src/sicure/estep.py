"""E-step of the Poisson/gamma-frailty data augmentation.

Given current parameters each subject gets posterior means of the latent
susceptibility ``B``, the product ``xi * B`` with the frailty ``xi``, and the
Poisson counts ``Y`` (events on ``(0, R]`` for left-censored subjects) and
``W`` (events on ``(L, R]`` for interval-censored subjects). The counts are then
thinned across the I-spline basis functions.

Notation: ``N1 = exp(beta'z) Lambda(L)``, ``N2 = exp(beta'z) Lambda(R)``,
``G1 = G(N1)``, ``G2 = G(N2)``. The gamma identities
``E exp(-xi x) = exp(-G(x))`` and ``E xi exp(-xi x) = exp(-(1 + r) G(x))`` give
every expectation in closed form.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .splines import SplineBasis, ispline_matrix
from .transform import _as_tr, g_of, log1p_ratio

__all__ = [
    "P_CLAMP",
    "DegenerateIntervalError",
    "EStepCache",
    "endpoint_design",
    "compute_loads",
    "expect_b",
    "expect_xi_b",
    "expect_poisson",
    "split_counts",
    "run_estep",
]

P_CLAMP = 1e-6


class DegenerateIntervalError(ArithmeticError):
    """A censoring interval carries zero probability under the current parameters."""


def _ind(indicators):
    """Accept a dataset or a ``(dl, di, dr)`` triple of boolean arrays."""
    if hasattr(indicators, "dl"):
        return indicators.dl, indicators.di, indicators.dr
    dl, di, dr = (np.asarray(a, dtype=bool) for a in indicators)
    return dl, di, dr


def clamp_p(p):
    return np.clip(np.asarray(p, dtype=float), P_CLAMP, 1.0 - P_CLAMP)


def endpoint_design(ds, basis: SplineBasis):
    """I-spline values at ``L`` and ``R`` for every subject.

    Returns ``(BL, BR)``, each ``n x k``. Rows of ``BR`` for right-censored
    subjects are zero and are never evaluated at infinity.
    """
    BL = ispline_matrix(basis, ds.left)
    BR = np.zeros_like(BL)
    fin = ~ds.dr
    if fin.any():
        BR[fin] = ispline_matrix(basis, ds.right[fin])
    return BL, BR


def compute_loads(ds, beta, eta, basis: SplineBasis | None = None, design=None):
    """Return ``(n1, n2)``.

    ``n2`` is a masked array whose entries for right-censored subjects are
    masked (absent), never a sentinel number.
    """
    eta = np.asarray(eta, dtype=float)
    if np.any(eta < 0):
        raise ValueError("eta must be componentwise nonnegative")
    if design is None:
        design = endpoint_design(ds, basis)
    BL, BR = design
    ez = np.exp(ds.Z @ np.asarray(beta, dtype=float)) if ds.d2 else np.ones(ds.n)
    n1 = ez * (BL @ eta)
    n2 = np.ma.masked_array(ez * (BR @ eta), mask=ds.dr.copy())
    return n1, n2


def _filled(n2):
    return np.ma.filled(n2, 0.0) if np.ma.isMaskedArray(n2) else np.nan_to_num(np.asarray(n2, float), posinf=0.0)


def expect_b(tr, n1, p_x, indicators):
    """Posterior probability of being susceptible.

    One for subjects with an observed event; for right-censored subjects
    ``p S1 / (1 - p + p S1)`` with ``S1 = exp(-G(N1))``.
    """
    tr = _as_tr(tr)
    _, _, dr = _ind(indicators)
    p = clamp_p(p_x)
    s1 = np.exp(-np.asarray(g_of(tr, np.asarray(n1, dtype=float))))
    post = p * s1 / (1.0 - p + p * s1)
    return np.where(dr, post, 1.0)


def _delta_g(tr, n1, n2):
    """``G(N2) - G(N1)`` without cancellation."""
    d = np.maximum(n2 - n1, 0.0)
    if tr.r == 0.0:
        return d
    q = d / (1.0 + tr.r * n1)
    return q * log1p_ratio(tr.r * q)


def _ratio_expm1(a, b, limit):
    """``expm1(-a) / expm1(-b)`` with the value ``limit`` where ``b == 0``."""
    safe_b = np.where(b > 0, b, 1.0)
    out = np.expm1(-a) / np.expm1(-safe_b)
    return np.where(b > 0, out, limit)


def expect_xi_b(tr, n1, n2, p_x, indicators):
    """Posterior mean of ``xi * B``."""
    tr = _as_tr(tr)
    r = tr.r
    dl, di, dr = _ind(indicators)
    n1 = np.asarray(n1, dtype=float)
    n2f = _filled(n2)
    g1 = np.asarray(g_of(tr, n1))
    g2 = np.asarray(g_of(tr, n2f))
    out = np.zeros_like(n1)
    if dl.any():
        out[dl] = _ratio_expm1((1.0 + r) * g2[dl], g2[dl], 1.0 + r)
    if di.any():
        dg = _delta_g(tr, n1[di], n2f[di])
        out[di] = np.exp(-r * g1[di]) * _ratio_expm1((1.0 + r) * dg, dg, 1.0 + r)
    if dr.any():
        p = clamp_p(np.broadcast_to(p_x, n1.shape))[dr]
        s1 = np.exp(-g1[dr])
        out[dr] = p * np.exp(-(1.0 + r) * g1[dr]) / (1.0 - p + p * s1)
    return out


def expect_poisson(tr, n1, n2, indicators):
    """Posterior means ``(E Y, E W)`` of the augmented Poisson counts.

    Raises
    ------
    DegenerateIntervalError
        If a left-censored subject has ``N2 = 0``.
    """
    tr = _as_tr(tr)
    dl, di, _ = _ind(indicators)
    n1 = np.asarray(n1, dtype=float)
    n2f = _filled(n2)
    e_y = np.zeros_like(n1)
    e_w = np.zeros_like(n1)
    if dl.any():
        a = n2f[dl]
        if np.any(a <= 0):
            bad = np.flatnonzero(dl)[a <= 0]
            raise DegenerateIntervalError(f"Lambda(R) = 0 for left-censored subjects {bad[:5].tolist()}")
        e_y[dl] = a / -np.expm1(-np.asarray(g_of(tr, a)))
    if di.any():
        d = n2f[di] - n1[di]
        dg = _delta_g(tr, n1[di], n2f[di])
        gp = 1.0 / (1.0 + tr.r * n1[di])
        safe = np.where(dg > 0, dg, 1.0)
        # a vanishing interval load has the limit 1 (one event, certainly)
        e_w[di] = np.where(dg > 0, d * gp / -np.expm1(-safe), 1.0)
    return e_y, e_w


def split_counts(e_y, e_w, eta, design, indicators):
    """Thin ``E Y`` and ``E W`` over basis functions.

    ``E Y_il = eta_l b_l(R) E Y / Lambda(R)`` and
    ``E W_il = eta_l {b_l(R) - b_l(L)} E W / {Lambda(R) - Lambda(L)}``.
    """
    dl, di, _ = _ind(indicators)
    BL, BR = design
    eta = np.asarray(eta, dtype=float)
    n, k = BL.shape
    e_y_il = np.zeros((n, k))
    e_w_il = np.zeros((n, k))
    if dl.any():
        num = BR[dl] * eta
        den = num.sum(axis=1)
        pos = np.asarray(e_y)[dl] > 0
        if np.any(pos & (den <= 0)):
            raise DegenerateIntervalError("zero Lambda(R) with positive expected count")
        e_y_il[dl] = num * (np.asarray(e_y)[dl] / np.where(den > 0, den, 1.0))[:, None]
    if di.any():
        num = np.maximum(BR[di] - BL[di], 0.0) * eta
        den = num.sum(axis=1)
        pos = np.asarray(e_w)[di] > 0
        if np.any(pos & (den <= 0)):
            raise DegenerateIntervalError("zero interval load with positive expected count")
        e_w_il[di] = num * (np.asarray(e_w)[di] / np.where(den > 0, den, 1.0))[:, None]
    return e_y_il, e_w_il


@dataclass
class EStepCache:
    """Posterior expectations at the current parameters (one entry per subject)."""

    e_b: np.ndarray
    e_xi_b: np.ndarray
    e_y: np.ndarray
    e_w: np.ndarray
    e_y_il: np.ndarray
    e_w_il: np.ndarray
    n1: np.ndarray
    n2: np.ma.MaskedArray

    @property
    def a_il(self) -> np.ndarray:
        """Expected event counts attributed to each basis function."""
        return self.e_y_il + self.e_w_il


def run_estep(ds, tr, beta, eta, p_x, design) -> EStepCache:
    """Full E-step given the endpoint design from :func:`endpoint_design`."""
    n1, n2 = compute_loads(ds, beta, eta, design=design)
    e_b = expect_b(tr, n1, p_x, ds)
    e_xi_b = expect_xi_b(tr, n1, n2, p_x, ds)
    e_y, e_w = expect_poisson(tr, n1, n2, ds)
    e_y_il, e_w_il = split_counts(e_y, e_w, eta, design, ds)
    return EStepCache(e_b, e_xi_b, e_y, e_w, e_y_il, e_w_il, n1, n2)
