"""Latency M-step: closed-form ``eta(beta)`` and a Newton solve of the profile score.

With ``a_il`` the expected event counts attributed to basis function ``l``
and ``c_il`` the basis value at the end of the subject's exposure
(``b_l(R)`` for subjects with an observed event, ``b_l(L)`` otherwise), the
expected complete-data log-likelihood of the latency part is

    Q2(beta, eta) = sum_l A_l log eta_l + sum_i a_i beta'z_i
                    - sum_l eta_l S0_l(beta),

    A_l = sum_i a_il,  a_i = sum_l a_il,
    S0_l(beta) = sum_i exp(beta'z_i) E(xi_i B_i) c_il.

So ``eta_l(beta) = A_l / S0_l(beta)`` and substituting it gives the profile
score ``U(beta) = sum_i a_i z_i - sum_l A_l S1_l / S0_l``, a Cox-type
estimating equation whose Jacobian is negative semidefinite.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DeadColumnWarning",
    "LatencyParams",
    "exposure_design",
    "eta_of_beta",
    "profile_score",
    "profile_jacobian",
    "q2",
    "solve_beta",
    "BetaSolution",
]


class DeadColumnWarning(UserWarning):
    """A basis function carries no event mass; its coefficient is fixed at zero."""


@dataclass
class LatencyParams:
    beta: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.eta = np.asarray(self.eta, dtype=float)
        if np.any(self.eta < 0):
            raise ValueError("eta must be nonnegative")
        if not np.all(np.isfinite(self.beta)):
            raise ValueError("beta must be finite")


def exposure_design(design, dr):
    """``c_il = (1 - delta_R) b_l(R) + delta_R b_l(L)``."""
    BL, BR = design
    return np.where(np.asarray(dr, bool)[:, None], BL, BR)


def _weights(cache, Z, beta):
    lp = Z @ beta if Z.shape[1] else np.zeros(Z.shape[0])
    return np.exp(lp) * cache.e_xi_b


def _sums(cache, Z, C, beta, order=1):
    w = _weights(cache, Z, beta)
    W = w[:, None] * C
    S0 = W.sum(axis=0)
    S1 = Z.T @ W
    if order < 2:
        return S0, S1, None
    S2 = np.einsum("il,ij,im->ljm", W, Z, Z)
    return S0, S1, S2


def eta_of_beta(cache, Z, C, beta, frozen=None, warn=True):
    """Closed-form ``eta_l = A_l / S0_l(beta)``.

    Columns with no event mass or no exposure, or listed in ``frozen``, are 0.
    """
    Z = np.asarray(Z, dtype=float)
    A = cache.a_il.sum(axis=0)
    S0, _, _ = _sums(cache, Z, C, np.asarray(beta, dtype=float))
    alive = (A > 0) & (S0 > 0)
    if frozen is not None:
        alive &= ~np.asarray(frozen, bool)
    if warn and np.any((A > 0) & (S0 <= 0)):
        warnings.warn("basis column with event mass but zero exposure; coefficient set to 0",
                      DeadColumnWarning, stacklevel=2)
    eta = np.zeros_like(A)
    eta[alive] = A[alive] / S0[alive]
    return eta


def _alive(A, S0, frozen):
    alive = (A > 0) & (S0 > 0)
    if frozen is not None:
        alive &= ~np.asarray(frozen, bool)
    return alive


def profile_score(cache, Z, C, beta, frozen=None):
    Z = np.asarray(Z, dtype=float)
    a_il = cache.a_il
    A = a_il.sum(axis=0)
    S0, S1, _ = _sums(cache, Z, C, np.asarray(beta, dtype=float))
    al = _alive(A, S0, frozen)
    return Z.T @ a_il.sum(axis=1) - S1[:, al] @ (A[al] / S0[al])


def profile_jacobian(cache, Z, C, beta, frozen=None):
    Z = np.asarray(Z, dtype=float)
    A = cache.a_il.sum(axis=0)
    S0, S1, S2 = _sums(cache, Z, C, np.asarray(beta, dtype=float), order=2)
    al = _alive(A, S0, frozen)
    S0, S1, S2, A = S0[al], S1[:, al], S2[al], A[al]
    m1 = S1 / S0
    J = np.einsum("l,ljm->jm", A / S0, S2) - (m1 * A) @ m1.T
    return -J


def q2(cache, Z, C, beta, eta):
    """Latency part of the expected complete-data log-likelihood (up to constants)."""
    Z = np.asarray(Z, dtype=float)
    eta = np.asarray(eta, dtype=float)
    a_il = cache.a_il
    A = a_il.sum(axis=0)
    S0, _, _ = _sums(cache, Z, C, np.asarray(beta, dtype=float))
    pos = A > 0
    if np.any(eta[pos] <= 0):
        return -np.inf
    lp = Z @ beta if Z.shape[1] else np.zeros(Z.shape[0])
    return float(np.sum(A[pos] * np.log(eta[pos])) + a_il.sum(axis=1) @ lp - eta @ S0)


@dataclass
class BetaSolution:
    beta: np.ndarray
    converged: bool
    n_iter: int
    score_norm: float


def _fd_jacobian(f, beta, eps=1e-6):
    d = beta.size
    J = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = eps * max(1.0, abs(beta[j]))
        J[:, j] = (f(beta + e) - f(beta - e)) / (2 * e[j])
    return J


def solve_beta(cache, Z, C, beta_start, frozen=None, tol=1e-8, max_iter=100) -> BetaSolution:
    """Newton iterations with step-halving on ``||U||`` until ``||U||_inf < tol``.

    Once inside the tolerance one more full Newton step is tried and kept if it
    lowers ``||U||``, so the returned score sits well below ``tol``.
    """
    Z = np.asarray(Z, dtype=float)
    beta = np.asarray(beta_start, dtype=float).copy()
    if beta.size == 0:
        return BetaSolution(beta, True, 0, 0.0)

    def U(b):
        return profile_score(cache, Z, C, b, frozen)

    u = U(beta)
    nrm = np.linalg.norm(u)
    for it in range(1, max_iter + 1):
        J = profile_jacobian(cache, Z, C, beta, frozen)
        if not np.all(np.isfinite(J)) or np.linalg.cond(J) > 1e12:
            J = _fd_jacobian(U, beta)
        try:
            step = -np.linalg.solve(J, u)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(J, u, rcond=None)[0]
        if np.max(np.abs(u)) < tol:
            uc = U(beta + step)
            if np.all(np.isfinite(uc)) and np.linalg.norm(uc) < nrm:
                beta, u = beta + step, uc
            return BetaSolution(beta, True, it, float(np.max(np.abs(u))))
        t = 1.0
        improved = False
        for _ in range(40):
            cand = beta + t * step
            uc = U(cand)
            nc = np.linalg.norm(uc)
            if np.all(np.isfinite(uc)) and nc < nrm:
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        beta, u, nrm = cand, uc, nc
    un = float(np.max(np.abs(u)))
    return BetaSolution(beta, un < tol, max_iter, un)
