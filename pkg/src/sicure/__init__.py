"""Single-index semiparametric transformation cure models for interval-censored data."""
from .data import CureDataset, DataError, IntervalObservation, load_csv, save_csv, validate
from .fit import FitConfig, FitResult, fit_em, fit_r_grid, load_fit, observed_loglik
from .splines import SplineBasis, eval_bspline, eval_ispline, make_basis
from .transform import Transformation
from .uncertainty import BootstrapResult, bootstrap, wald_p

__version__ = "0.1.0"


def schema(name: str) -> dict:
    """Load a shipped JSON schema: ``"fit_result"``, ``"bootstrap_result"`` or ``"dataset"``."""
    import json
    from importlib.resources import files

    return json.loads(files(__package__).joinpath("schemas", f"{name}.schema.json").read_text())


__all__ = [
    "CureDataset", "DataError", "IntervalObservation", "load_csv", "save_csv", "validate",
    "FitConfig", "FitResult", "fit_em", "fit_r_grid", "load_fit", "observed_loglik",
    "SplineBasis", "eval_bspline", "eval_ispline", "make_basis", "Transformation",
    "BootstrapResult", "bootstrap", "wald_p", "schema",
]
