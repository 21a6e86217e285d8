"""Independent reference computations shared by unit and acceptance tests."""
import math

import numpy as np
from scipy import integrate, stats


def latent_monte_carlo(kind, n1, n2, p, r, n_draws=1_000_000, seed=0, chunk=500_000):
    """Rejection-sample the augmentation layers and condition on the censoring pattern.

    Layers: ``B ~ Bernoulli(p)``; ``xi ~ Gamma(mean 1, var r)`` (``xi = 1`` when
    ``r = 0``); counts ``C1 ~ Poisson(xi N1)`` on ``(0, L]`` and
    ``C2 ~ Poisson(xi (N2 - N1))`` on ``(L, R]``. Returns means and Monte-Carlo
    standard errors of ``B``, ``xi B``, ``Y`` and ``W`` over at least
    ``n_draws`` accepted draws.
    """
    rng = np.random.default_rng(seed)
    acc = {"b": [], "xib": [], "y": [], "w": []}
    n_acc = 0
    while n_acc < n_draws:
        B = rng.uniform(size=chunk) < p
        xi = rng.gamma(1.0 / r, r, chunk) if r > 0 else np.ones(chunk)
        c1 = rng.poisson(xi * n1) if n1 > 0 else np.zeros(chunk, dtype=np.int64)
        c2 = rng.poisson(xi * (n2 - n1)) if np.isfinite(n2) else np.zeros(chunk, dtype=np.int64)
        if kind == "L":
            keep = B & (c2 > 0)
            y, w = c2, np.zeros(chunk)
        elif kind == "I":
            keep = B & (c1 == 0) & (c2 > 0)
            y, w = np.zeros(chunk), c2
        else:
            keep = ~B | (c1 == 0)
            y, w = np.zeros(chunk), np.zeros(chunk)
        acc["b"].append(B[keep].astype(float))
        acc["xib"].append((xi * B)[keep])
        acc["y"].append(y[keep].astype(float))
        acc["w"].append(w[keep].astype(float))
        n_acc += int(keep.sum())
    out = {}
    for k, v in acc.items():
        v = np.concatenate(v)
        out[k] = (float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size)))
    out["n"] = n_acc
    return out


def _count_mass(rates, require_positive, cutoff):
    """Sum of product Poisson pmfs over all count vectors up to ``cutoff`` per
    coordinate, optionally excluding the all-zero vector."""
    grid = np.ones(())
    for lam in rates:
        grid = np.multiply.outer(grid, stats.poisson.pmf(np.arange(cutoff + 1), lam))
    total = grid.sum()
    if require_positive:
        total -= grid.flat[0]
    return float(total)


def marginal_factor(kind, bL, bR, eta, bz, p, r, cutoff=60):
    """Observed-likelihood factor by summing the complete-data likelihood over the
    latent counts and susceptibility and integrating the frailty by quadrature."""
    ez = math.exp(bz)
    bL, bR, eta = map(np.asarray, (bL, bR, eta))
    dens = stats.gamma(a=1.0 / r, scale=r).pdf

    def latency(xi):
        first = xi * ez * eta * bL           # rates on (0, L]
        second = xi * ez * eta * (bR - bL)   # rates on (L, R]
        if kind == "L":
            return _count_mass(xi * ez * eta * bR, True, cutoff)
        if kind == "I":
            zero_first = math.prod(stats.poisson.pmf(0, lam) for lam in first)
            return zero_first * _count_mass(second, True, cutoff)
        return math.prod(stats.poisson.pmf(0, lam) for lam in first)

    val, _ = integrate.quad(lambda s: latency(s) * dens(s), 0, np.inf, epsabs=1e-13, epsrel=1e-10, limit=200)
    if kind == "R":
        return (1 - p) + p * val
    return p * val


def q2_oracle(ds, design, cache, beta, eta):
    """Expected complete-data latency log-likelihood written per censoring type; complex-safe."""
    BL, BR = design
    total = 0.0
    for i in range(ds.n):
        lp = ds.Z[i] @ beta
        ez = np.exp(lp)
        exposure = BL[i] if ds.dr[i] else BR[i]
        counts = cache.e_y_il[i] + cache.e_w_il[i]
        for l in range(len(eta)):
            if counts[l] > 0:
                total = total + counts[l] * (np.log(eta[l]) + lp)
            total = total - cache.e_xi_b[i] * ez * eta[l] * exposure[l]
    return total


def score_oracle(ds, design, cache, beta, eta):
    BL, BR = design
    out = np.zeros(ds.d2)
    for i in range(ds.n):
        ez = np.exp(ds.Z[i] @ beta)
        exposure = BL[i] if ds.dr[i] else BR[i]
        counts = cache.e_y_il[i] + cache.e_w_il[i]
        out += ds.Z[i] * (counts.sum() - cache.e_xi_b[i] * ez * (eta @ exposure))
    return out


def cox_de_boor(knots, degree, j, u):
    """Textbook recursion, right-continuous, with the last interval closed."""
    if degree == 0:
        if knots[j] <= u < knots[j + 1]:
            return 1.0
        if u == knots[-1] and knots[j] < knots[j + 1] == knots[-1]:
            return 1.0
        return 0.0
    out = 0.0
    d1 = knots[j + degree] - knots[j]
    if d1 > 0:
        out += (u - knots[j]) / d1 * cox_de_boor(knots, degree - 1, j, u)
    d2 = knots[j + degree + 1] - knots[j + 1]
    if d2 > 0:
        out += (knots[j + degree + 1] - u) / d2 * cox_de_boor(knots, degree - 1, j + 1, u)
    return out


def mspline(basis, i, t):
    """Normalized B-spline of degree d-1 (integrates to one) on the I-spline knots."""
    d = basis.degree
    kv = np.r_[[basis.lo] * d, basis.interior_knots, [basis.hi] * d]
    width = kv[i + d] - kv[i]
    if width <= 0:
        return 0.0
    return d * cox_de_boor(kv, d - 1, i, t) / width


def loo_double_loop(u, y, h):
    n = len(u)
    out = np.empty(n)
    for i in range(n):
        num = den = 0.0
        for j in range(n):
            if j == i:
                continue
            v = (u[i] - u[j]) / h
            w = (3 - 0.6 * v * v) / (4 * np.sqrt(5)) if v * v <= 5 else 0.0
            num += w * y[j]
            den += w
        out[i] = num / den if den > 0 else np.mean(y)
    return out


def central_gradient(f, x, h=1e-6):
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out
