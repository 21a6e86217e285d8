"""Nonparametric bootstrap for standard errors, intervals and hazard bands."""
from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .data import CureDataset
from .splines import ispline_matrix

__all__ = ["BootstrapResult", "bootstrap", "wald_p", "format_p", "resample_indices"]

UNRELIABLE_FRACTION = 0.2


def wald_p(estimate, se):
    """Two-sided normal p-value of ``estimate / se``; ``se = 0`` gives 0 with a warning."""
    estimate = np.asarray(estimate, dtype=float)
    se = np.asarray(se, dtype=float)
    zero = se <= 0
    if np.any(zero):
        warnings.warn("standard error is zero; p-value reported as 0", RuntimeWarning, stacklevel=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = 2.0 * norm.sf(np.abs(estimate / np.where(zero, 1.0, se)))
    p = np.where(zero, 0.0, p)
    return float(p) if p.ndim == 0 else p


def format_p(p, level=0.05):
    """Two-decimal p-value with a star when below ``level``: 0.0032 -> ``"0.00*"``."""
    return f"{p:.2f}" + ("*" if p < level else "")


def resample_indices(n, seed, rep):
    """Case-resampling indices for replicate ``rep``; independent of run order."""
    return np.random.default_rng([seed, rep]).integers(0, n, n)


@dataclass
class BootstrapResult:
    b: int
    names: list
    estimate: np.ndarray
    se: np.ndarray
    ci_normal: np.ndarray
    ci_percentile: np.ndarray
    lambda_band: np.ndarray
    replicate_status: list
    replicates: np.ndarray = field(repr=False)
    unreliable: bool = False
    n_beta: int = 0

    @property
    def beta_se(self):
        return self.se[: self.n_beta]

    @property
    def gamma_se(self):
        return self.se[self.n_beta:]

    @property
    def converged_fraction(self):
        return float(np.mean(self.replicate_status)) if self.replicate_status else 0.0

    def table(self) -> list[dict]:
        """Rows with estimate, SE and Wald p-value for each parameter."""
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ps = wald_p(self.estimate, self.se)
        return [{"Par": n, "Est": float(e), "SE": float(s), "p-value": float(p), "p_fmt": format_p(p)}
                for n, e, s, p in zip(self.names, self.estimate, self.se, np.atleast_1d(ps))]

    def to_dict(self) -> dict:
        return {
            "b": self.b,
            "names": list(self.names),
            "estimate": self.estimate.tolist(),
            "se": self.se.tolist(),
            "beta_se": self.beta_se.tolist(),
            "gamma_se": self.gamma_se.tolist(),
            "ci_normal": self.ci_normal.tolist(),
            "ci_percentile": self.ci_percentile.tolist(),
            "lambda_band": self.lambda_band.tolist(),
            "replicate_status": [bool(s) for s in self.replicate_status],
            "converged_fraction": self.converged_fraction,
            "unreliable": self.unreliable,
            "table": self.table(),
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def save_band(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "lo", "hi"])
            w.writerows(self.lambda_band.tolist())


def _theta(fit):
    parts = [fit.beta, fit.gamma]
    names = [f"beta{j + 1}" for j in range(fit.beta.size)] + [f"gamma{j + 1}" for j in range(fit.gamma.size)]
    if fit.params.incidence.gamma0 is not None:
        parts.append([fit.params.incidence.gamma0])
        names.append("gamma0")
    return np.concatenate([np.ravel(p) for p in parts]), names


def _replicate(args):
    from .fit import fit_em

    ds, idx, config, init, basis = args
    try:
        f = fit_em(ds.subset(idx), config, init=init, basis=basis)
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError):
        return None, False
    return (_theta(f)[0], f.eta.copy()), bool(f.converged)


def bootstrap(ds: CureDataset, config=None, b: int = 200, seed: int = 0, fit=None, resamples=None,
              cold_start: bool = False, t_grid=None, workers=None) -> BootstrapResult:
    """Case-resampling bootstrap of a fit.

    Parameters
    ----------
    ds : CureDataset
    config : FitConfig
    b : int
        Number of replicates (>= 2).
    seed : int
        Replicate ``j`` resamples with the stream ``(seed, j)``.
    fit : FitResult, optional
        The point estimate; fitted here if absent.
    resamples : sequence of index arrays, optional
        Explicit resamples (length must equal ``b``).
    cold_start : bool
        Refit replicates from the default start instead of the point estimate.
    t_grid : array_like, optional
        Times for the pointwise band of ``Lambda``; 50 points by default.
    workers : int, optional
        Process count (``SICURE_THREADS`` by default).
    """
    from .fit import FitConfig, fit_em
    from .simulate import n_workers

    if b < 2:
        raise ValueError("b must be >= 2")
    config = config or FitConfig()
    if resamples is not None and len(resamples) != b:
        raise ValueError(f"got {len(resamples)} resamples for b={b}")
    if config.standardize:
        # resample on the standardized scale of the original fit
        from .data import standardize
        ds, _ = standardize(ds)
        config = replace(config, standardize=False)
        fit = None
    if fit is None:
        fit = fit_em(ds, config)
    theta_hat, names = _theta(fit)
    if t_grid is None:
        t_grid = np.linspace(0.0, fit.basis.hi, 50)
    t_grid = np.asarray(t_grid, dtype=float)
    init = None if cold_start else fit.params
    jobs = []
    for rep in range(b):
        idx = resample_indices(ds.n, seed, rep) if resamples is None else np.asarray(resamples[rep], int)
        jobs.append((ds, idx, config, init, fit.basis))
    workers = n_workers() if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            outs = list(pool.map(_replicate, jobs))
    else:
        outs = [_replicate(j) for j in jobs]
    status = [ok for _, ok in outs]
    good = [o for o, ok in outs if ok and o is not None]
    if len(good) >= 2:
        reps = np.array([g[0] for g in good])
        se = reps.std(axis=0, ddof=1)
        lam = np.array([ispline_matrix(fit.basis, t_grid) @ g[1] for g in good])
        band = np.column_stack([t_grid, np.percentile(lam, 2.5, axis=0), np.percentile(lam, 97.5, axis=0)])
        pct = np.column_stack([np.percentile(reps, 2.5, axis=0), np.percentile(reps, 97.5, axis=0)])
    else:
        reps = np.empty((0, theta_hat.size))
        se = np.full(theta_hat.size, np.nan)
        band = np.column_stack([t_grid, np.full_like(t_grid, np.nan), np.full_like(t_grid, np.nan)])
        pct = np.full((theta_hat.size, 2), np.nan)
    ci_n = np.column_stack([theta_hat - 1.96 * se, theta_hat + 1.96 * se])
    unreliable = (1.0 - np.mean(status)) > UNRELIABLE_FRACTION
    if unreliable:
        warnings.warn(f"{100 * (1 - np.mean(status)):.0f}% of bootstrap replicates failed to converge",
                      RuntimeWarning, stacklevel=2)
    return BootstrapResult(b, names, theta_hat, se, ci_n, pct, band, status, reps, bool(unreliable),
                           fit.beta.size)
