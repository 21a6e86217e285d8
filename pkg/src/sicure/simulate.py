"""Synthetic interval-censored cure data and replicate summaries.

Covariates are ``X1 ~ U(-1, 2)``, ``X2 ~ N(0, 1)``, ``X3 ~ Bernoulli(0.5)``
for the incidence and ``Z1 ~ U(0, 2)``, ``Z2 ~ N(0, 1)``, ``Z3 ~ Bernoulli(0.5)``
for the latency; ``gamma0 = (1, -1, 1)/sqrt 3``, ``beta0 = (1, -1, 1)`` and
``Lambda0(t) = 0.5 log(1 + t) + 0.5 t^1.5 + 0.5 t^3``. The three scenarios
differ in the incidence link.

Censoring: each subject gets ``n_exams`` examination times, the order
statistics of uniforms on ``[0, horizon]``. The event is bracketed by the
tightest pair of exams; an event before the first exam is left-censored, and
cured subjects or events after the last exam are right-censored at the last
exam.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import CureDataset
from .transform import Transformation, g_inverse

__all__ = [
    "GAMMA0",
    "BETA0",
    "DEFAULT_TUNING",
    "SIEVE_KNOTS",
    "ScenarioSpec",
    "SimMetrics",
    "true_link",
    "gen_covariates",
    "gen_incidence",
    "lambda0",
    "lambda0_inverse",
    "gen_event_time",
    "gen_censoring",
    "generate",
    "ase_grid",
    "ase",
    "coef_metrics",
    "run_replicates",
    "n_workers",
]

GAMMA0 = np.array([1.0, -1.0, 1.0]) / math.sqrt(3.0)
BETA0 = np.array([1.0, -1.0, 1.0])

# interior knots of the sieve link per scenario; the rougher links need more
SIEVE_KNOTS = {1: 3, 2: 8, 3: 10}

# (n_exams, horizon) per (scenario, r); tuned so left-censoring falls in
# [0.10, 0.15] and right-censoring in [0.39, 0.46]
DEFAULT_TUNING = {
    (1, 0.0): (20, 1.2), (1, 1.0): (25, 2.0), (1, 2.0): (40, 3.9),
    (2, 0.0): (15, 0.8), (2, 1.0): (20, 1.35), (2, 2.0): (25, 2.3),
    (3, 0.0): (15, 0.85), (3, 1.0): (20, 1.45), (3, 2.0): (30, 2.55),
}


def true_link(scenario: int, u):
    """Incidence link ``g(u)`` of each scenario."""
    u = np.asarray(u, dtype=float)
    if scenario == 1:
        return expit(u)
    if scenario == 2:
        # (1 + tanh(1.5 u^5)) / 2 written as a logistic; keeps p > 0 in the lower tail
        return expit(3.0 * u ** 5)
    if scenario == 3:
        return expit(4.8 * u ** 3 - 8.0 * u ** 2 + 3.2 * u + 0.85)
    raise ValueError(f"scenario must be 1, 2 or 3, got {scenario}")


def gen_covariates(n, rng):
    X = np.column_stack([rng.uniform(-1.0, 2.0, n), rng.standard_normal(n), rng.binomial(1, 0.5, n)])
    Z = np.column_stack([rng.uniform(0.0, 2.0, n), rng.standard_normal(n), rng.binomial(1, 0.5, n)])
    return X.astype(float), Z.astype(float)


def gen_incidence(scenario: int, x):
    """Uncure probability ``g(gamma0'x)`` for covariate rows ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return true_link(scenario, x @ GAMMA0)


def lambda0(t):
    t = np.asarray(t, dtype=float)
    return 0.5 * np.log1p(t) + 0.5 * t ** 1.5 + 0.5 * t ** 3


def lambda0_inverse(target, rtol=1e-10):
    """Solve ``lambda0(t) = target`` by vectorized bisection."""
    target = np.atleast_1d(np.asarray(target, dtype=float))
    if np.any(target < 0):
        raise ValueError("target must be nonnegative")
    lo = np.zeros_like(target)
    hi = np.ones_like(target)
    while np.any(lambda0(hi) < target):
        grow = lambda0(hi) < target
        hi[grow] *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        below = lambda0(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= rtol * np.maximum(hi, 1e-300)):
            break
    return 0.5 * (lo + hi)


def gen_event_time(tr, beta, z, u):
    """Event time with ``S_u(t | z) = u`` for susceptible subjects."""
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("u must lie in (0, 1)")
    z = np.atleast_2d(np.asarray(z, dtype=float))
    lp = z @ np.asarray(beta, dtype=float)
    target = np.asarray(g_inverse(tr, -np.log(u))) * np.exp(-lp)
    out = lambda0_inverse(target)
    return out if np.ndim(u) else float(out[0])


def gen_censoring(t, n_exams: int, horizon: float, rng):
    """Bracket event times ``t`` (``inf`` for cured) by random examination schedules.

    Returns ``(left, right)`` arrays.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if n_exams < 1:
        raise ValueError("need at least one exam")
    V = np.sort(rng.uniform(0.0, horizon, (t.size, n_exams)), axis=1)
    j = np.sum(V < t[:, None], axis=1)  # exams strictly before the event
    left = np.where(j > 0, V[np.arange(t.size), np.maximum(j - 1, 0)], 0.0)
    right = np.where(j < n_exams, V[np.arange(t.size), np.minimum(j, n_exams - 1)], np.inf)
    return left, right


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: int
    r: float
    n: int
    seed: int = 0
    censor_tuning: tuple | None = None

    def __post_init__(self):
        if self.scenario not in (1, 2, 3):
            raise ValueError("scenario must be 1, 2 or 3")
        if self.n < 10:
            raise ValueError("n must be >= 10")
        Transformation(self.r)
        if self.censor_tuning is None:
            key = (self.scenario, float(self.r))
            object.__setattr__(self, "censor_tuning", DEFAULT_TUNING.get(key, DEFAULT_TUNING[(self.scenario, 0.0)]))


def generate(spec: ScenarioSpec, rng=None, return_truth=False):
    """Draw one dataset.

    With ``return_truth`` also returns a dict with the event times, cure
    indicators and true uncure probabilities.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    X, Z = gen_covariates(spec.n, rng)
    p = gen_incidence(spec.scenario, X)
    susceptible = rng.uniform(size=spec.n) < p
    u = rng.uniform(size=spec.n)
    u = np.clip(u, 1e-300, 1 - 1e-16)
    t = np.where(susceptible, gen_event_time(Transformation(spec.r), BETA0, Z, u), np.inf)
    left, right = gen_censoring(t, *spec.censor_tuning, rng)
    ds = CureDataset.from_arrays(left, right, X, Z)
    if return_truth:
        return ds, {"t": t, "cured": ~susceptible, "p": p}
    return ds


# metrics -------------------------------------------------------------------

def ase_grid():
    """Fixed covariate grid for the incidence ASE: 31 x 31 x 2 = 1922 points."""
    x1 = np.round(np.arange(-1.0, 2.0 + 1e-9, 0.1), 10)
    x2 = np.round(np.arange(-1.5, 1.5 + 1e-9, 0.1), 10)
    g1, g2, g3 = np.meshgrid(x1, x2, [0.0, 1.0], indexing="ij")
    return np.column_stack([g1.ravel(), g2.ravel(), g3.ravel()])


def ase(p_hat, p_true):
    p_hat = np.asarray(p_hat, float)
    return float(np.mean((p_hat - np.asarray(p_true, float)) ** 2))


def coef_metrics(estimates, truth, ses=None):
    """Bias, ESD, ESE and 95% coverage of normal intervals across replicates."""
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    truth = np.asarray(truth, dtype=float)
    bias = est.mean(axis=0) - truth
    esd = est.std(axis=0, ddof=1) if est.shape[0] > 1 else np.zeros(est.shape[1])
    out = {"bias": bias, "esd": esd, "ese": None, "cp": None}
    if ses is not None:
        se = np.atleast_2d(np.asarray(ses, dtype=float))
        out["ese"] = se.mean(axis=0)
        out["cp"] = np.mean(np.abs(est - truth) <= 1.96 * se, axis=0)
    return out


@dataclass
class SimMetrics:
    ase_per_replicate: np.ndarray
    bias: np.ndarray
    esd: np.ndarray
    ese: np.ndarray | None
    cp: np.ndarray | None
    censor_rates: tuple
    cure_rate: float
    estimates: np.ndarray
    ses: np.ndarray | None
    n_failed: int = 0
    failures: list = field(default_factory=list)

    def table(self, names=("beta1", "beta2", "beta3")) -> list[dict]:
        rows = []
        for j, name in enumerate(names):
            rows.append({"Par": name, "Bias": float(self.bias[j]), "ESD": float(self.esd[j]),
                         "ESE": None if self.ese is None else float(self.ese[j]),
                         "CP": None if self.cp is None else float(self.cp[j])})
        return rows


def n_workers(default=1):
    """Worker count from the ``SICURE_THREADS`` environment variable."""
    try:
        return max(1, int(os.environ.get("SICURE_THREADS", default)))
    except ValueError:
        return default


def _one_replicate(args):
    from .fit import fit_em
    from .uncertainty import bootstrap

    spec, rep, fit_config, boot_b = args
    rng = np.random.default_rng([spec.seed, rep])
    ds, truth = generate(spec, rng, return_truth=True)
    rec = {"rep": rep, "rates": ds.censor_rates(), "cure": float(truth["cured"].mean())}
    try:
        fit = fit_em(ds, fit_config)
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        rec["error"] = f"{type(exc).__name__}: {exc}"
        return rec
    grid = ase_grid()
    rec["beta"] = fit.beta.copy()
    rec["gamma"] = fit.gamma.copy()
    rec["converged"] = fit.converged
    rec["n_iter"] = fit.n_iter
    rec["ase"] = ase(fit.params.incidence.predict(grid), gen_incidence(spec.scenario, grid))
    if boot_b:
        br = bootstrap(ds, fit_config, boot_b, seed=spec.seed * 100003 + rep, fit=fit)
        rec["beta_se"] = br.beta_se
    return rec


def run_replicates(spec: ScenarioSpec, n_reps: int, fit_config, bootstrap_b: int = 0, workers=None,
                   return_records=False):
    """Generate and fit ``n_reps`` datasets; summarize as in a simulation table.

    Replicate ``j`` uses the RNG stream ``(spec.seed, j)``, so results do not
    depend on ``workers``.
    """
    if n_reps < 2:
        raise ValueError("n_reps must be >= 2")
    workers = n_workers() if workers is None else workers
    jobs = [(spec, j, fit_config, bootstrap_b) for j in range(n_reps)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            recs = list(pool.map(_one_replicate, jobs))
    else:
        recs = [_one_replicate(j) for j in jobs]
    recs.sort(key=lambda r: r["rep"])
    ok = [r for r in recs if "error" not in r]
    failures = [(r["rep"], r["error"]) for r in recs if "error" in r]
    if not ok:
        raise RuntimeError(f"all replicates failed: {failures[:3]}")
    est = np.array([r["beta"] for r in ok])
    ses = np.array([r["beta_se"] for r in ok]) if bootstrap_b else None
    m = coef_metrics(est, BETA0, ses)
    rates = tuple(np.mean([r["rates"] for r in recs], axis=0).tolist())
    out = SimMetrics(np.array([r["ase"] for r in ok]), m["bias"], m["esd"], m["ese"], m["cp"], rates,
                     float(np.mean([r["cure"] for r in recs])), est, ses, len(failures), failures)
    return (out, recs) if return_records else out
