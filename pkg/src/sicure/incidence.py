"""Incidence engines for the uncure probability ``p(X) = g(gamma'X)``.

* ``kernel``: leave-one-out Nadaraya-Watson smoother of the posterior
  susceptibility ``E(B)`` on the single index, Epanechnikov kernel.
* ``sieve``: B-spline link on ``[min gamma'X, max gamma'X]``.
* ``logistic``: ordinary logistic regression with intercept (parametric
  comparator).

For the two single-index engines ``gamma`` lives on the unit sphere with a
positive first coordinate and is updated by maximizing

    Q1(gamma) = sum_i E(B_i) log g(gamma'X_i) + {1 - E(B_i)} log{1 - g(gamma'X_i)}.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from ._kernels import kernel_loo_fast, kernel_q1_fast, nadaraya_watson_fast
from .estep import P_CLAMP, clamp_p
from .splines import SplineBasis, bspline_matrix, make_index_basis

__all__ = [
    "ENGINES",
    "IncidenceWarning",
    "IncidenceState",
    "epanechnikov",
    "kernel_loo",
    "nadaraya_watson",
    "q1",
    "project_sphere",
    "angles_to_sphere",
    "sphere_to_angles",
    "update_gamma_kernel",
    "fit_sieve_link",
    "update_sieve",
    "update_logistic",
    "select_bandwidth",
    "initial_gamma",
    "DEFAULT_H_GRID",
    "logistic_state",
    "kernel_state",
    "sieve_state",
]

ENGINES = ("kernel", "sieve", "logistic")
DEFAULT_H_GRID = tuple(np.round(np.arange(0.1, 0.5 + 1e-9, 0.05), 10))
COEF_CLIP = 50.0


class IncidenceWarning(UserWarning):
    pass


def epanechnikov(v):
    """``K(v) = (3 - 0.6 v^2) I(v^2 <= 5) / (4 sqrt 5)``."""
    v = np.asarray(v, dtype=float)
    return np.where(v * v <= 5.0, (3.0 - 0.6 * v * v) / (4.0 * np.sqrt(5.0)), 0.0)


def kernel_loo(u, y, h):
    """Leave-one-out kernel estimate at every index value.

    Isolated points (no neighbour inside the kernel support) get the global
    mean of ``y``.
    """
    u = np.asarray(u, dtype=float)
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    if u.size < 2:
        raise ValueError("need at least two points")
    return kernel_loo_fast(u, y, h)


def nadaraya_watson(u_train, y_train, u_new, h):
    """Ordinary (not leave-one-out) kernel estimate at new index values."""
    return nadaraya_watson_fast(u_train, y_train, u_new, h)


def q1(e_b, p):
    p = clamp_p(p)
    return float(np.sum(e_b * np.log(p) + (1.0 - e_b) * np.log1p(-p)))


# sphere charts -------------------------------------------------------------

def project_sphere(g):
    """Normalize to unit length and flip so that the first coordinate is positive."""
    g = np.asarray(g, dtype=float)
    nrm = np.linalg.norm(g)
    if not np.isfinite(nrm) or nrm == 0:
        raise ValueError("cannot project a zero or non-finite vector")
    g = g / nrm
    if g[0] < 0:
        g = -g
    elif g[0] == 0:
        nz = np.flatnonzero(g)
        if g[nz[0]] < 0:
            g = -g
    return g


def angles_to_sphere(theta):
    theta = np.asarray(theta, dtype=float)
    d = theta.size + 1
    g = np.ones(d)
    s = 1.0
    for j in range(d - 1):
        g[j] = s * np.cos(theta[j])
        s *= np.sin(theta[j])
    g[-1] = s
    return g


def sphere_to_angles(g):
    g = np.asarray(g, dtype=float)
    d = g.size
    theta = np.zeros(d - 1)
    for j in range(d - 2):
        theta[j] = np.arctan2(np.linalg.norm(g[j + 1:]), g[j])
    if d >= 2:
        # last angle spans the full circle
        theta[-1] = np.arctan2(g[-1], g[-2]) % (2 * np.pi)
    return theta


def _sphere_search(objective, gamma, rng, n_perturb=2, scale=0.3, maxfev=None):
    """Maximize ``objective`` over the sphere by multistart Nelder-Mead.

    Returns ``(gamma_best, value_best, ok)``. The current point is kept unless
    a strictly better one is found.
    """
    gamma = project_sphere(gamma)
    d = gamma.size
    f0 = objective(gamma)
    if d == 1:
        return gamma, f0, True

    def neg(theta):
        return -objective(angles_to_sphere(theta))

    theta0 = sphere_to_angles(gamma)
    starts = [theta0] + [theta0 + scale * rng.standard_normal(d - 1) for _ in range(n_perturb)]
    best_g, best_f, ok = gamma, f0, False
    maxfev = maxfev or 60 * d
    for th in starts:
        try:
            res = minimize(neg, th, method="Nelder-Mead",
                           options={"xatol": 1e-4, "fatol": 1e-6, "maxfev": maxfev})
        except (ValueError, FloatingPointError):
            continue
        ok = True
        if np.isfinite(res.fun) and -res.fun > best_f:
            best_g, best_f = project_sphere(angles_to_sphere(res.x)), -res.fun
    return best_g, best_f, ok


# state ---------------------------------------------------------------------

@dataclass
class IncidenceState:
    """Current incidence fit.

    ``u_train``/``y_train`` are kept for the kernel engine so the link can be
    evaluated at new covariate values.
    """

    engine: str
    gamma: np.ndarray
    fitted_p: np.ndarray
    h: float | None = None
    sieve_basis: SplineBasis | None = None
    psi: np.ndarray | None = None
    gamma0: float | None = None
    u_train: np.ndarray | None = None
    y_train: np.ndarray | None = None
    flags: list = field(default_factory=list)

    def link(self, u):
        """``g(u)`` on the index scale (single-index engines)."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if self.engine == "kernel":
            return clamp_p(nadaraya_watson(self.u_train, self.y_train, u, self.h))
        if self.engine == "sieve":
            return clamp_p(bspline_matrix(self.sieve_basis, u) @ self.psi)
        return clamp_p(1.0 / (1.0 + np.exp(-(self.gamma0 + u))))

    def predict(self, X):
        """Uncure probability at covariates ``X`` (``m x d1``)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.link(X @ self.gamma)

    def to_dict(self) -> dict:
        d = {"engine": self.engine, "gamma": self.gamma.tolist()}
        if self.engine == "kernel":
            d.update(h=self.h, u_train=self.u_train.tolist(), y_train=self.y_train.tolist())
        elif self.engine == "sieve":
            d.update(sieve_basis=self.sieve_basis.to_dict(), psi=self.psi.tolist())
        else:
            d.update(gamma0=self.gamma0)
        return d

    @classmethod
    def from_dict(cls, d: dict, fitted_p=None) -> "IncidenceState":
        st = cls(d["engine"], np.asarray(d["gamma"], float), np.asarray(fitted_p if fitted_p is not None else [], float))
        if st.engine == "kernel":
            st.h = float(d["h"])
            st.u_train = np.asarray(d["u_train"], float)
            st.y_train = np.asarray(d["y_train"], float)
        elif st.engine == "sieve":
            st.sieve_basis = SplineBasis.from_dict(d["sieve_basis"])
            st.psi = np.asarray(d["psi"], float)
        else:
            st.gamma0 = float(d["gamma0"])
        return st


# kernel engine -----------------------------------------------------------------

def _kernel_q1(X, e_b, h):
    e_b = np.ascontiguousarray(e_b, dtype=float)

    def f(g):
        return kernel_q1_fast(X @ g, e_b, h, P_CLAMP)
    return f


def update_gamma_kernel(X, e_b, gamma_current, h, rng=None, n_perturb=2):
    """Improve ``gamma`` for the kernel engine.

    Returns ``(gamma_new, p_new, flag)``; ``flag`` is ``None`` or a warning
    string when the optimizer failed and the current value was kept.
    """
    X = np.asarray(X, dtype=float)
    rng = np.random.default_rng(0) if rng is None else rng
    if np.ptp(e_b) == 0:
        g = project_sphere(gamma_current)
        return g, clamp_p(kernel_loo(X @ g, e_b, h)), None
    g, _, ok = _sphere_search(_kernel_q1(X, e_b, h), gamma_current, rng, n_perturb)
    flag = None if ok else "gamma optimizer failed; kept current value"
    if flag:
        warnings.warn(flag, IncidenceWarning, stacklevel=2)
    return g, clamp_p(kernel_loo(X @ g, e_b, h)), flag


def select_bandwidth(u, e_b, h_grid=DEFAULT_H_GRID):
    """Likelihood cross-validation: argmax over the grid (ties to the smaller h)."""
    h_grid = [float(h) for h in h_grid]
    if not h_grid:
        raise ValueError("empty bandwidth grid")
    scores = [q1(e_b, kernel_loo(u, e_b, h)) for h in h_grid]
    j = int(np.argmax(scores))
    return h_grid[j], scores


# sieve engine --------------------------------------------------------------

def fit_sieve_link(u, e_b, n_knots=3, degree=3):
    """Least-squares B-spline fit of ``e_b`` on ``u`` with coefficients clamped to (0, 1).

    Partition of unity keeps every fitted value inside ``[min psi, max psi]``.
    """
    basis = make_index_basis(u, degree=degree, n_knots=n_knots)
    Bm = bspline_matrix(basis, u)
    psi, *_ = np.linalg.lstsq(Bm, e_b, rcond=None)
    psi = np.clip(psi, P_CLAMP, 1.0 - P_CLAMP)
    return basis, psi, Bm @ psi


def update_sieve(X, e_b, gamma_current, n_knots=3, degree=3, rng=None, n_perturb=2):
    """Improve ``gamma`` for the sieve engine, refitting the link per candidate.

    Returns ``(gamma, basis, psi, p, flag)``.
    """
    X = np.asarray(X, dtype=float)
    rng = np.random.default_rng(0) if rng is None else rng

    def f(g):
        return q1(e_b, fit_sieve_link(X @ g, e_b, n_knots, degree)[2])

    g, _, ok = _sphere_search(f, gamma_current, rng, n_perturb)
    flag = None if ok else "gamma optimizer failed; kept current value"
    if flag:
        warnings.warn(flag, IncidenceWarning, stacklevel=2)
    basis, psi, p = fit_sieve_link(X @ g, e_b, n_knots, degree)
    return g, basis, psi, clamp_p(p), flag


# logistic engine ---------------------------------------------------------

def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def update_logistic(X, e_b, start=None, max_iter=100, tol=1e-10):
    """Maximize the Bernoulli log-likelihood with fractional responses by Newton.

    Returns ``(gamma0, gamma, flag)``; ``flag`` reports separation. When an
    iterate leaves the box ``|coef| <= 50`` the result is pulled back along the
    last Newton step onto the box; by concavity this never lowers the
    objective below the starting value.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(e_b, dtype=float)
    A = np.column_stack([np.ones(len(y)), X])
    c = np.zeros(A.shape[1]) if start is None else np.asarray(start, dtype=float).copy()

    def ll(coef):
        eta = A @ coef
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))

    cur = ll(c)
    flag = None
    for _ in range(max_iter):
        mu = _sigmoid(A @ c)
        grad = A.T @ (y - mu)
        W = mu * (1.0 - mu)
        H = (A * W[:, None]).T @ A + 1e-12 * np.eye(A.shape[1])
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while t > 1e-8:
            cand = c + t * step
            new = ll(cand)
            if new >= cur - 1e-12:
                break
            t *= 0.5
        else:
            break
        if np.max(np.abs(cand)) > COEF_CLIP:
            flag = "logistic coefficients exceeded 50 (separation); clipped"
            if np.max(np.abs(c)) <= COEF_CLIP:
                d = cand - c
                with np.errstate(divide="ignore", invalid="ignore"):
                    room = np.where(d != 0, (COEF_CLIP * np.sign(d) - c) / d, np.inf)
                c = c + min(1.0, float(np.min(room))) * d
            else:
                c = np.clip(cand, -COEF_CLIP, COEF_CLIP)
            break
        c, prev = cand, cur
        cur = new
        if abs(cur - prev) < tol and np.max(np.abs(t * step)) < 1e-8:
            break
    if flag:
        warnings.warn(flag, IncidenceWarning, stacklevel=2)
    return float(c[0]), c[1:], flag


def initial_gamma(X, pseudo):
    """Starting index direction from a logistic fit on pseudo-responses."""
    _, g, _ = update_logistic(X, pseudo)
    if not np.all(np.isfinite(g)) or np.linalg.norm(g) == 0:
        g = np.zeros(np.asarray(X).shape[1])
        g[0] = 1.0
    return project_sphere(g)


def logistic_state(X, gamma0, gamma):
    p = clamp_p(_sigmoid(gamma0 + np.asarray(X) @ gamma))
    return IncidenceState("logistic", np.asarray(gamma, float), p, gamma0=float(gamma0))


def kernel_state(X, e_b, gamma, h):
    u = np.asarray(X) @ gamma
    return IncidenceState("kernel", gamma, clamp_p(kernel_loo(u, e_b, h)), h=float(h),
                          u_train=u, y_train=np.asarray(e_b, float).copy())


def sieve_state(X, e_b, gamma, n_knots=3, degree=3):
    basis, psi, p = fit_sieve_link(np.asarray(X) @ gamma, e_b, n_knots, degree)
    return IncidenceState("sieve", gamma, clamp_p(p), sieve_basis=basis, psi=psi)

