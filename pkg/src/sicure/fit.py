"""EM fitting of the single-index transformation cure model.

Each iteration runs the E-step at the current parameters, updates the
incidence part (index direction and link), then solves for ``beta`` and sets
``eta = eta(beta)`` in closed form. The observed-data log-likelihood is
recorded after every iteration.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from . import incidence as inc
from .data import CureDataset, standardize, validate
from .estep import clamp_p, endpoint_design, run_estep, _delta_g
from .mstep import eta_of_beta, exposure_design, solve_beta
from .splines import SplineBasis, make_basis
from .transform import Transformation, g_of, g_prime

__all__ = [
    "FitConfig",
    "ModelParams",
    "FitResult",
    "EMAscentError",
    "FitWarning",
    "observed_loglik",
    "subject_loglik",
    "n_parameters",
    "fit_em",
    "fit_r_grid",
    "GridResult",
    "load_fit",
    "predict_loglik",
]

LOG_FLOOR = math.log(1e-300)
ASCENT_TOL = 1e-6


class EMAscentError(RuntimeError):
    """The observed log-likelihood decreased where EM guarantees ascent."""


class FitWarning(UserWarning):
    pass


@dataclass
class FitConfig:
    """Settings for :func:`fit_em`.

    ``eta_init`` is ``"scaled"`` (every coefficient ``1/k`` so the initial
    ``Lambda`` rises to 1) or ``"ones"``. ``accelerate`` follows every
    ``accelerate_every``-th EM iteration with a short bounded quasi-Newton
    search on the observed log-likelihood over the latency parameters (and the
    logistic coefficients), kept only when the log-likelihood rises. EM alone
    crawls when ``r`` is large.
    """

    r: float = 0.0
    engine: str = "kernel"
    degree: int = 3
    n_knots: int = 5
    placement: str = "quantile"
    h_grid: tuple = inc.DEFAULT_H_GRID
    max_iter: int = 500
    tol_param: float = 1e-4
    tol_loglik: float = 1e-7
    seed: int = 0
    standardize: bool = False
    sieve_knots: int = 3
    sieve_degree: int = 3
    bandwidth_every: int = 5
    n_perturb: int = 2
    perturb_every: int = 5
    eta_init: str = "scaled"
    accelerate: bool = True
    accelerate_every: int = 1

    def __post_init__(self):
        Transformation(self.r)
        if self.engine not in inc.ENGINES:
            raise ValueError(f"engine must be one of {inc.ENGINES}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.bandwidth_every < 1 or self.perturb_every < 1 or self.accelerate_every < 1:
            raise ValueError("bandwidth_every, perturb_every and accelerate_every must be >= 1")
        if not (self.tol_param > 0 and self.tol_loglik > 0):
            raise ValueError("tolerances must be positive")
        if self.eta_init not in ("scaled", "ones"):
            raise ValueError("eta_init must be 'scaled' or 'ones'")
        self.h_grid = tuple(float(h) for h in self.h_grid)
        if not self.h_grid or min(self.h_grid) <= 0:
            raise ValueError("h_grid must be nonempty and positive")

    def to_dict(self):
        d = asdict(self)
        d["h_grid"] = list(self.h_grid)
        return d


@dataclass
class ModelParams:
    gamma: np.ndarray
    beta: np.ndarray
    eta: np.ndarray
    incidence: inc.IncidenceState

    @property
    def h(self):
        return self.incidence.h

    def vector(self):
        parts = [self.gamma, self.beta, self.eta]
        if self.incidence.gamma0 is not None:
            parts.append([self.incidence.gamma0])
        return np.concatenate([np.ravel(p) for p in parts])


@dataclass
class FitResult:
    params: ModelParams
    loglik: float
    aic: float
    bic: float
    n_iter: int
    converged: bool
    loglik_trace: list
    warnings: list
    r: float
    basis: SplineBasis
    config: FitConfig
    n: int
    n_par: int
    standardization: dict | None = None

    @property
    def gamma(self):
        return self.params.gamma

    @property
    def beta(self):
        return self.params.beta

    @property
    def eta(self):
        return self.params.eta

    def cumhaz(self, t):
        from .splines import ispline_matrix
        return ispline_matrix(self.basis, np.atleast_1d(t)) @ self.eta

    def to_dict(self) -> dict:
        p = self.params
        return {
            "engine": p.incidence.engine,
            "r": self.r,
            "params": {
                "gamma": p.gamma.tolist(),
                "beta": p.beta.tolist(),
                "eta": p.eta.tolist(),
                "h": p.incidence.h,
                "incidence": p.incidence.to_dict(),
            },
            "basis": self.basis.to_dict(),
            "loglik": self.loglik,
            "aic": self.aic,
            "bic": self.bic,
            "n": self.n,
            "n_par": self.n_par,
            "n_iter": self.n_iter,
            "converged": self.converged,
            "loglik_trace": list(self.loglik_trace),
            "warnings": list(self.warnings),
            "standardization": self.standardization,
            "config": self.config.to_dict(),
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def load_fit(obj) -> FitResult:
    """Rebuild a :class:`FitResult` from :meth:`FitResult.to_dict` output or a JSON path."""
    if isinstance(obj, (str, Path)):
        obj = json.loads(Path(obj).read_text())
    pr = obj["params"]
    st = inc.IncidenceState.from_dict(pr["incidence"])
    params = ModelParams(np.asarray(pr["gamma"], float), np.asarray(pr["beta"], float),
                         np.asarray(pr["eta"], float), st)
    cfg = dict(obj["config"])
    cfg["h_grid"] = tuple(cfg["h_grid"])
    return FitResult(params, obj["loglik"], obj["aic"], obj["bic"], obj["n_iter"], obj["converged"],
                     obj["loglik_trace"], obj["warnings"], obj["r"], SplineBasis.from_dict(obj["basis"]),
                     FitConfig(**cfg), obj["n"], obj["n_par"], obj.get("standardization"))


# likelihood ----------------------------------------------------------------

def subject_loglik(ds: CureDataset, p_x, beta, eta, tr, design) -> np.ndarray:
    """Per-subject observed log-likelihood contributions.

    Factors are ``1 - S_u(R)`` (left), ``S_u(L) - S_u(R)`` (interval),
    ``1 - p + p S_u(L)`` (right), times ``p`` for subjects with an event;
    each is floored at 1e-300 before the log.
    """
    tr = tr if isinstance(tr, Transformation) else Transformation(tr)
    BL, BR = design
    lp = ds.Z @ np.asarray(beta, float) if ds.d2 else np.zeros(ds.n)
    ez = np.exp(lp)
    n1 = ez * (BL @ eta)
    n2 = ez * (BR @ eta)
    p = clamp_p(p_x)
    g1 = np.asarray(g_of(tr, n1))
    out = np.empty(ds.n)
    dl, di, dr = ds.dl, ds.di, ds.dr
    with np.errstate(divide="ignore"):
        if dl.any():
            out[dl] = np.log(p[dl]) + np.log(-np.expm1(-np.asarray(g_of(tr, n2[dl]))))
        if di.any():
            dg = _delta_g(tr, n1[di], n2[di])
            out[di] = np.log(p[di]) - g1[di] + np.log(-np.expm1(-dg))
        if dr.any():
            out[dr] = np.log(1.0 - p[dr] + p[dr] * np.exp(-g1[dr]))
    return np.maximum(np.nan_to_num(out, nan=LOG_FLOOR, neginf=LOG_FLOOR), LOG_FLOOR)


def loglik_gradient(ds: CureDataset, p_x, beta, eta, tr, design):
    """Observed log-likelihood and its gradient.

    Returns ``(ll, d_beta, d_eta, d_p)`` where ``d_p`` is per subject. Subjects
    at the 1e-300 floor and clamped ``p`` contribute zero gradient.
    """
    tr = tr if isinstance(tr, Transformation) else Transformation(tr)
    BL, BR = design
    eta = np.asarray(eta, float)
    lp = ds.Z @ np.asarray(beta, float) if ds.d2 else np.zeros(ds.n)
    ez = np.exp(lp)
    n1 = ez * (BL @ eta)
    n2 = ez * (BR @ eta)
    pc = clamp_p(p_x)
    per = subject_loglik(ds, p_x, beta, eta, tr, design)
    g1 = np.asarray(g_of(tr, n1))
    w1 = np.zeros(ds.n)  # d log f / d n1
    w2 = np.zeros(ds.n)  # d log f / d n2
    dp = np.zeros(ds.n)
    dl, di, dr = ds.dl, ds.di, ds.dr
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        if dl.any():
            w2[dl] = g_prime(tr, n2[dl]) / np.expm1(np.asarray(g_of(tr, n2[dl])))
            dp[dl] = 1.0 / pc[dl]
        if di.any():
            dg = _delta_g(tr, n1[di], n2[di])
            den = -np.expm1(-dg)
            w1[di] = -g_prime(tr, n1[di]) / den
            w2[di] = g_prime(tr, n2[di]) * np.exp(-dg) / den
            dp[di] = 1.0 / pc[di]
        if dr.any():
            s1 = np.exp(-g1[dr])
            f = 1.0 - pc[dr] + pc[dr] * s1
            w1[dr] = -pc[dr] * s1 * g_prime(tr, n1[dr]) / f
            dp[dr] = (s1 - 1.0) / f
    live = (per > LOG_FLOOR) & np.isfinite(w1) & np.isfinite(w2)
    w1, w2 = np.where(live, w1, 0.0), np.where(live, w2, 0.0)
    dp = np.where(live & (pc == np.asarray(p_x, float)), dp, 0.0)
    d_beta = ds.Z.T @ (w1 * n1 + w2 * n2) if ds.d2 else np.zeros(0)
    d_eta = BL.T @ (w1 * ez) + BR.T @ (w2 * ez)
    return float(per.sum()), d_beta, d_eta, dp


def observed_loglik(ds, p_x, beta, eta, tr, basis: SplineBasis | None = None, design=None) -> float:
    if design is None:
        design = endpoint_design(ds, basis)
    return float(np.sum(subject_loglik(ds, p_x, beta, eta, tr, design)))


def n_parameters(engine, d1, d2, k, m_sieve=0):
    """Free-parameter count used for AIC/BIC."""
    if engine == "logistic":
        n_inc = d1 + 1
    elif engine == "kernel":
        n_inc = (d1 - 1) + 1
    else:
        n_inc = (d1 - 1) + m_sieve
    return n_inc + d2 + k


# EM ------------------------------------------------------------------------

def _canonical_order(ds):
    keys = [ds.Z[:, j] for j in range(ds.d2 - 1, -1, -1)] + [ds.X[:, j] for j in range(ds.d1 - 1, -1, -1)]
    keys += [ds.right, ds.left]
    return np.lexsort(keys)


def _initial_incidence(ds, cfg, rng, gamma):
    pseudo = (~ds.dr).astype(float)
    X = ds.X
    if cfg.engine == "logistic":
        if not ds.dr.any():
            g0 = math.log((1 - 1e-6) / 1e-6)
            return inc.logistic_state(X, g0, np.zeros(ds.d1))
        g0, g, _ = inc.update_logistic(X, pseudo)
        return inc.logistic_state(X, g0, g)
    if cfg.engine == "kernel":
        h, _ = inc.select_bandwidth(X @ gamma, pseudo, cfg.h_grid)
        return inc.kernel_state(X, pseudo, gamma, h)
    return inc.sieve_state(X, pseudo, gamma, cfg.sieve_knots, cfg.sieve_degree)


def _warm_incidence(ds, cfg, init: ModelParams):
    st = init.incidence
    X = ds.X
    if cfg.engine == "logistic":
        return inc.logistic_state(X, st.gamma0, st.gamma)
    p = st.predict(X)
    new = inc.IncidenceState(cfg.engine, project_gamma(st.gamma), clamp_p(p), h=st.h,
                             sieve_basis=st.sieve_basis, psi=st.psi)
    if cfg.engine == "kernel":
        new.u_train, new.y_train = X @ new.gamma, p.copy()
    return new


def project_gamma(g):
    return inc.project_sphere(g)


def _direct_step(theta, d2, frozen, objective, current, maxiter=20):
    """Bounded quasi-Newton on the observed log-likelihood from ``theta = (beta, eta, ...)``.

    Incidence is held at its current fit; entries after ``eta`` are the logistic
    coefficients when that engine is used. ``objective`` returns the
    log-likelihood and its gradient. Returns ``None`` unless ``current`` improves.
    """
    k = frozen.size
    bounds = ([(None, None)] * d2 + [(0.0, 0.0) if f else (0.0, None) for f in frozen]
              + [(-inc.COEF_CLIP, inc.COEF_CLIP)] * (theta.size - d2 - k))

    def nll(th):
        with np.errstate(all="ignore"):
            v, g = objective(th)
        if not (np.isfinite(v) and np.all(np.isfinite(g))):
            return 1e300, np.zeros_like(th)
        return -v, -g

    res = minimize(nll, theta, jac=True, method="L-BFGS-B", bounds=bounds, options={"maxiter": maxiter})
    if np.isfinite(res.fun) and -res.fun > current:
        return res.x, -res.fun
    return None


def fit_em(ds: CureDataset, config: FitConfig | None = None, init: ModelParams | FitResult | None = None,
           basis: SplineBasis | None = None, callback=None, init_in_sample: bool = False) -> FitResult:
    """Fit the model by EM.

    Parameters
    ----------
    ds : CureDataset
    config : FitConfig, optional
    init : ModelParams or FitResult, optional
        Warm start (used by the bootstrap and the ``r`` grid).
    basis : SplineBasis, optional
        Reuse a given I-spline basis instead of building one from ``ds``.
    callback : callable, optional
        Called after every iteration as ``callback(iteration, gamma, beta, eta, loglik)``.
    init_in_sample : bool
        ``init`` was fitted to these same rows in the same order; its in-sample
        incidence fit is reused as is (for the kernel engine this keeps the
        leave-one-out fitted values instead of re-smoothing).

    Raises
    ------
    EMAscentError
        Logistic engine only, when the log-likelihood drops by more than 1e-6.
    """
    cfg = config or FitConfig()
    problems = validate(ds)
    if problems:
        raise ValueError("; ".join(str(p) for p in problems))
    notes = []
    std_info = None
    if cfg.standardize:
        ds, std_info = standardize(ds)

    order = _canonical_order(ds)
    inv = np.empty_like(order)
    inv[order] = np.arange(ds.n)
    ds = ds.subset(order)

    tr = Transformation(cfg.r)
    rng = np.random.default_rng(cfg.seed)
    if basis is None:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            basis = make_basis(ds.finite_endpoints, cfg.degree, cfg.n_knots, cfg.placement)
        notes += [str(w.message) for w in caught]
    design = endpoint_design(ds, basis)
    C = exposure_design(design, ds.dr)
    X, Z = ds.X, ds.Z
    k = basis.k

    if not ds.dr.any():
        notes.append("no cure signal: no right-censored subjects, incidence degenerates to 1")

    if isinstance(init, FitResult):
        init = init.params
    if init is not None:
        beta = np.asarray(init.beta, float).copy()
        eta = np.asarray(init.eta, float).copy()
        state = _warm_incidence(ds, cfg, init)
        if init_in_sample and cfg.engine == "kernel" and init.incidence.engine == "kernel":
            st = init.incidence
            if st.fitted_p.size != ds.n:
                raise ValueError("init_in_sample needs a fit to the same rows")
            state.fitted_p = st.fitted_p[order].copy()
            state.y_train = st.y_train[order].copy()
    else:
        beta = np.zeros(ds.d2)
        eta = np.full(k, 1.0 / k if cfg.eta_init == "scaled" else 1.0)
        if cfg.engine == "logistic":
            gamma = np.zeros(ds.d1)
        elif ds.dr.any():
            gamma = inc.initial_gamma(X, (~ds.dr).astype(float))
        else:
            gamma = np.eye(ds.d1)[0]
        state = _initial_incidence(ds, cfg, rng, gamma)

    frozen = np.zeros(k, dtype=bool)

    def loglik_of(st, b, e):
        return observed_loglik(ds, st.fitted_p, b, e, tr, design=design)

    ll = loglik_of(state, beta, eta)
    trace = [ll]
    smooth_inc = cfg.engine == "logistic" and bool(ds.dr.any())

    def pack(st, b, e):
        return np.r_[b, e, st.gamma0, st.gamma] if smooth_inc else np.r_[b, e]

    def jump_objective(th):
        b, e = th[:ds.d2], th[ds.d2:ds.d2 + k]
        if not smooth_inc:
            ll_, gb, ge, _ = loglik_gradient(ds, state.fitted_p, b, e, tr, design)
            return ll_, np.r_[gb, ge]
        p_raw = inc._sigmoid(th[ds.d2 + k] + X @ th[ds.d2 + k + 1:])
        ll_, gb, ge, gp = loglik_gradient(ds, p_raw, b, e, tr, design)
        w = gp * p_raw * (1.0 - p_raw)
        return ll_, np.r_[gb, ge, w.sum(), X.T @ w]

    flat = 0
    ref_vec, ref_ll = np.concatenate([state.gamma, beta, eta, [state.gamma0 or 0.0]]), ll
    converged = False
    n_iter = 0
    for it in range(cfg.max_iter):
        n_iter = it + 1
        cache = run_estep(ds, tr, beta, eta, state.fitted_p, design)
        e_b = cache.e_b

        # incidence; random restarts only every perturb_every iterations
        n_perturb = cfg.n_perturb if it % cfg.perturb_every == 0 else 0
        if cfg.engine == "kernel":
            h = state.h
            if it % cfg.bandwidth_every == 0:
                h, _ = inc.select_bandwidth(X @ state.gamma, e_b, cfg.h_grid)
            g, p, flag = inc.update_gamma_kernel(X, e_b, state.gamma, h, rng, n_perturb)
            state = inc.IncidenceState("kernel", g, p, h=h, u_train=X @ g, y_train=e_b.copy())
        elif cfg.engine == "sieve":
            g, sb, psi, p, flag = inc.update_sieve(X, e_b, state.gamma, cfg.sieve_knots, cfg.sieve_degree,
                                                   rng, n_perturb)
            state = inc.IncidenceState("sieve", g, p, sieve_basis=sb, psi=psi)
        else:
            flag = None
            if ds.dr.any():
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always")
                    g0, g, flag = inc.update_logistic(X, e_b, start=np.r_[state.gamma0, state.gamma])
                state = inc.logistic_state(X, g0, g)
        if flag and flag not in notes:
            notes.append(flag)

        # latency
        frozen |= cache.a_il.sum(axis=0) <= 0
        sol = solve_beta(cache, Z, C, beta, frozen)
        if not sol.converged:
            msg = f"beta solve did not reach tolerance at iteration {n_iter} (|U|={sol.score_norm:.2e})"
            notes.append(msg)
        beta = sol.beta
        eta = eta_of_beta(cache, Z, C, beta, frozen, warn=False)

        new_ll = loglik_of(state, beta, eta)
        if cfg.accelerate and it % cfg.accelerate_every == 0:
            jump = _direct_step(pack(state, beta, eta), ds.d2, frozen, jump_objective, new_ll)
            if jump is not None:
                th, new_ll = jump
                beta, eta = th[:ds.d2].copy(), th[ds.d2:ds.d2 + k].copy()
                if smooth_inc:
                    state = inc.logistic_state(X, th[ds.d2 + k], th[ds.d2 + k + 1:])
        trace.append(new_ll)
        if callback is not None:
            callback(n_iter, state.gamma, beta, eta, new_ll)
        if new_ll < ll - ASCENT_TOL:
            msg = f"log-likelihood decreased by {ll - new_ll:.3g} at iteration {n_iter}"
            if cfg.engine == "logistic":
                raise EMAscentError(msg)
            if len([w for w in notes if w.startswith("log-likelihood decreased")]) < 5:
                notes.append(msg)
        ll = new_ll
        # with acceleration, test only after a quasi-Newton step and measure the whole
        # cycle: plain EM steps are tiny when EM crawls, far from the optimum
        if cfg.accelerate and it % cfg.accelerate_every:
            continue
        new_vec = np.concatenate([state.gamma, beta, eta, [state.gamma0 or 0.0]])
        dpar = float(np.max(np.abs(new_vec - ref_vec)))
        dll = abs(new_ll - ref_ll) / max(abs(new_ll), 1e-300)
        ref_vec, ref_ll = new_vec, new_ll
        # the loglik rule must hold twice running: one flat step can be a cancellation
        flat = flat + 1 if dll < cfg.tol_loglik else 0
        if dpar < cfg.tol_param or flat >= 2:
            converged = True
            break

    if frozen.any():
        notes.append(f"dead basis columns fixed at zero: {np.flatnonzero(frozen).tolist()}")
    if not converged:
        notes.append(f"EM did not converge in {cfg.max_iter} iterations")

    # restore caller's row order for per-subject quantities
    state.fitted_p = state.fitted_p[inv]
    if state.engine == "kernel":
        state.u_train, state.y_train = state.u_train[inv], state.y_train[inv]
    params = ModelParams(state.gamma, beta, eta, state)
    m_sieve = state.psi.size if state.psi is not None else 0
    n_par = n_parameters(cfg.engine, ds.d1, ds.d2, k, m_sieve)
    return FitResult(params, ll, -2 * ll + 2 * n_par, -2 * ll + math.log(ds.n) * n_par, n_iter, converged,
                     trace, notes, tr.r, basis, cfg, ds.n, n_par, std_info)


def predict_loglik(fit: FitResult, ds: CureDataset) -> float:
    """Observed log-likelihood of new data under a fitted model (validation score)."""
    if fit.standardization:
        s = fit.standardization
        ds = CureDataset.from_arrays(ds.left, ds.right,
                                     (ds.X - np.asarray(s["x_mean"])) / np.asarray(s["x_sd"]),
                                     (ds.Z - np.asarray(s["z_mean"])) / np.asarray(s["z_sd"]))
    p = fit.params.incidence.predict(ds.X)
    return observed_loglik(ds, p, fit.beta, fit.eta, fit.r, basis=fit.basis)


@dataclass
class GridResult:
    best_r: float
    fit: FitResult
    profile: list = field(default_factory=list)
    failures: list = field(default_factory=list)


def fit_r_grid(ds_train: CureDataset, ds_valid: CureDataset, config: FitConfig, r_grid,
               warm: bool = True) -> GridResult:
    """Fit on ``ds_train`` for each ``r`` and score on ``ds_valid``.

    Ties go to the smaller ``r``. Failed fits are recorded and skipped. With
    ``warm`` each fit starts from the previous successful one (continuation in
    ``r``), which keeps the profile smooth where the likelihood has flat ridges.
    """
    r_grid = sorted(float(r) for r in r_grid)
    if not r_grid:
        raise ValueError("empty r grid")
    best = prev = None
    profile, failures = [], []
    for r in r_grid:
        cfg = FitConfig(**{**config.to_dict(), "r": r, "h_grid": tuple(config.h_grid)})
        try:
            if warm and prev is not None:
                fit = fit_em(ds_train, cfg, init=prev, basis=prev.basis, init_in_sample=True)
            else:
                fit = fit_em(ds_train, cfg)
            score = predict_loglik(fit, ds_valid)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            failures.append((r, str(exc)))
            continue
        prev = fit
        profile.append((r, score))
        if best is None or score > best[1]:
            best = (r, score, fit)
    if best is None:
        raise RuntimeError(f"every fit in the r grid failed: {failures}")
    return GridResult(best[0], best[2], profile, failures)

