"""Interval-censored cure data: observation records, validation and I/O.

A subject is observed only through an interval ``(L, R]`` that brackets the
event time. ``L = 0`` means the event happened before the first examination
(left-censored), ``R = inf`` means no event was seen (right-censored), and
anything else is a genuine interval. Censoring indicators are always derived
from ``(L, R)``; files never carry them.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "DataError",
    "Violation",
    "IntervalObservation",
    "CureDataset",
    "derive_indicators",
    "validate",
    "load_csv",
    "save_csv",
    "dataset_to_json",
    "dataset_from_json",
    "standardize",
    "train_valid_split",
]


class DataError(ValueError):
    """Malformed or invalid input data."""


@dataclass(frozen=True)
class Violation:
    index: int | None
    rule: str

    def __str__(self):
        where = "dataset" if self.index is None else f"observation {self.index}"
        return f"{where}: {self.rule}"


def derive_indicators(left: float, right: float) -> tuple[int, int, int]:
    """Return ``(delta_l, delta_i, delta_r)`` implied by an interval.

    Raises
    ------
    DataError
        If the interval is not a valid censoring interval.
    """
    if not (math.isfinite(left) and left >= 0):
        raise DataError(f"left endpoint must be finite and >= 0, got {left}")
    if math.isnan(right):
        raise DataError("right endpoint is NaN")
    if math.isinf(right):
        if right < 0:
            raise DataError("right endpoint is -inf")
        return 0, 0, 1
    if right <= left:
        raise DataError(f"right <= left ({right} <= {left})")
    if left == 0.0:
        return 1, 0, 0
    return 0, 1, 0


@dataclass(frozen=True)
class IntervalObservation:
    """One subject's censoring interval and covariates.

    Use :meth:`from_interval` to construct with derived indicators; the
    explicit constructor exists so that invalid records can be represented and
    reported by :func:`validate`.
    """

    left: float
    right: float
    delta_l: int
    delta_i: int
    delta_r: int
    x: tuple
    z: tuple

    @classmethod
    def from_interval(cls, left, right, x, z) -> "IntervalObservation":
        left, right = float(left), float(right)
        dl, di, dr = derive_indicators(left, right)
        return cls(left, right, dl, di, dr, tuple(float(v) for v in x), tuple(float(v) for v in z))

    def violations(self, index=None) -> list[Violation]:
        out = []
        bits = (self.delta_l, self.delta_i, self.delta_r)
        if any(b not in (0, 1) for b in bits) or sum(bits) != 1:
            out.append(Violation(index, "indicator triple not one-hot"))
        try:
            derived = derive_indicators(self.left, self.right)
        except DataError as exc:
            out.append(Violation(index, f"invalid interval: {exc}"))
        else:
            if derived != bits and sum(bits) == 1:
                out.append(Violation(index, "indicators inconsistent with (left, right)"))
        if not all(math.isfinite(v) for v in self.x + self.z):
            out.append(Violation(index, "non-finite covariate"))
        return out


@dataclass(frozen=True, eq=False)
class CureDataset:
    """Immutable collection of observations with cached array views.

    Attributes
    ----------
    observations : tuple of IntervalObservation
    d1, d2 : int
        Incidence and latency covariate dimensions.
    """

    observations: tuple
    d1: int
    d2: int
    _arrays: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        obs = tuple(self.observations)
        object.__setattr__(self, "observations", obs)
        n = len(obs)
        left = np.array([o.left for o in obs], dtype=float)
        right = np.array([o.right for o in obs], dtype=float)
        X = np.array([o.x for o in obs], dtype=float).reshape(n, self.d1)
        Z = np.array([o.z for o in obs], dtype=float).reshape(n, self.d2)
        ind = np.array([(o.delta_l, o.delta_i, o.delta_r) for o in obs], dtype=np.int8).reshape(n, 3)
        arrays = dict(left=left, right=right, X=X, Z=Z,
                      dl=ind[:, 0].astype(bool), di=ind[:, 1].astype(bool), dr=ind[:, 2].astype(bool))
        for a in arrays.values():
            a.setflags(write=False)
        object.__setattr__(self, "_arrays", arrays)

    @classmethod
    def from_arrays(cls, left, right, X, Z) -> "CureDataset":
        """Build from endpoint and covariate arrays, deriving indicators."""
        left = np.asarray(left, dtype=float)
        right = np.asarray(right, dtype=float)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Z = np.asarray(Z, dtype=float)
        n = left.size
        if X.shape[0] != n:
            X = X.reshape(n, -1)
        Z = Z.reshape(n, -1)
        obs = [IntervalObservation.from_interval(left[i], right[i], X[i], Z[i]) for i in range(n)]
        return cls(tuple(obs), X.shape[1], Z.shape[1])

    def __len__(self):
        return len(self.observations)

    def __eq__(self, other):
        if not isinstance(other, CureDataset):
            return NotImplemented
        return (self.d1, self.d2, self.observations) == (other.d1, other.d2, other.observations)

    n = property(lambda self: len(self.observations))
    left = property(lambda self: self._arrays["left"])
    right = property(lambda self: self._arrays["right"])
    X = property(lambda self: self._arrays["X"])
    Z = property(lambda self: self._arrays["Z"])
    dl = property(lambda self: self._arrays["dl"])
    di = property(lambda self: self._arrays["di"])
    dr = property(lambda self: self._arrays["dr"])

    @property
    def finite_endpoints(self) -> np.ndarray:
        """Sorted positive left endpoints together with finite right endpoints."""
        vals = np.concatenate([self.left[self.left > 0], self.right[np.isfinite(self.right)]])
        return np.sort(vals)

    def subset(self, idx) -> "CureDataset":
        """Rows ``idx`` (repeats allowed, as in a bootstrap resample)."""
        idx = np.asarray(idx, dtype=int)
        return CureDataset(tuple(self.observations[i] for i in idx), self.d1, self.d2)

    def censor_rates(self) -> tuple[float, float, float]:
        return float(self.dl.mean()), float(self.di.mean()), float(self.dr.mean())


def validate(ds: CureDataset) -> list[Violation]:
    """Check every invariant; return all violations (empty list means valid)."""
    out = []
    if len(ds.observations) == 0:
        return [Violation(None, "no observations")]
    for i, o in enumerate(ds.observations):
        out.extend(o.violations(i))
        if len(o.x) != ds.d1 or len(o.z) != ds.d2:
            out.append(Violation(i, "covariate dimension mismatch"))
    if not any(o.delta_r == 0 for o in ds.observations):
        out.append(Violation(None, "no finite endpoints (every subject right-censored)"))
    return out


def _parse_right(cell: str) -> float:
    s = cell.strip()
    if s == "" or s.lower() in ("inf", "+inf"):
        return math.inf
    return float(s)


def load_csv(path, x_cols: Sequence[str] | None = None, z_cols: Sequence[str] | None = None) -> CureDataset:
    """Read a CSV with header ``left,right,x1..xd1,z1..zd2``.

    Right-censoring is an empty ``right`` cell or ``inf`` (any case). By
    default covariate columns are the headers starting with ``x`` and ``z``;
    pass ``x_cols``/``z_cols`` to select them explicitly.

    Raises
    ------
    DataError
        With the 1-based data row number for malformed rows.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if header[:2] != ["left", "right"]:
            raise DataError(f"{path}: header must start with 'left,right', got {header[:2]}")
        if x_cols is None:
            x_cols = [h for h in header[2:] if h.lower().startswith("x")]
        if z_cols is None:
            z_cols = [h for h in header[2:] if h.lower().startswith("z")]
        missing = [c for c in list(x_cols) + list(z_cols) if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        if not x_cols:
            raise DataError(f"{path}: no incidence covariate columns")
        xi = [header.index(c) for c in x_cols]
        zi = [header.index(c) for c in z_cols]
        obs = []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(c.strip() == "" for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"row {row_no}: expected {len(header)} fields, got {len(row)}")
            try:
                left = float(row[0])
                right = _parse_right(row[1])
                x = [float(row[j]) for j in xi]
                z = [float(row[j]) for j in zi]
            except ValueError as exc:
                raise DataError(f"row {row_no}: non-numeric value ({exc})") from None
            if not all(math.isfinite(v) for v in x + z):
                raise DataError(f"row {row_no}: non-finite covariate")
            if left < 0:
                raise DataError(f"row {row_no}: left < 0")
            if math.isfinite(right) and right <= left:
                raise DataError(f"row {row_no}: right <= left")
            try:
                obs.append(IntervalObservation.from_interval(left, right, x, z))
            except DataError as exc:
                raise DataError(f"row {row_no}: {exc}") from None
    ds = CureDataset(tuple(obs), len(xi), len(zi))
    problems = validate(ds)
    if problems:
        raise DataError("; ".join(str(p) for p in problems))
    return ds


def save_csv(ds: CureDataset, path) -> None:
    """Write ``ds`` so that :func:`load_csv` reproduces it exactly."""
    header = ["left", "right"] + [f"x{j + 1}" for j in range(ds.d1)] + [f"z{j + 1}" for j in range(ds.d2)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for o in ds.observations:
            right = "inf" if math.isinf(o.right) else repr(o.right)
            w.writerow([repr(o.left), right] + [repr(v) for v in o.x] + [repr(v) for v in o.z])


def _enc(v: float):
    return "inf" if math.isinf(v) else v


def dataset_to_json(ds: CureDataset) -> dict:
    return {
        "d1": ds.d1,
        "d2": ds.d2,
        "observations": [
            {"left": o.left, "right": _enc(o.right), "delta_l": o.delta_l, "delta_i": o.delta_i,
             "delta_r": o.delta_r, "x": list(o.x), "z": list(o.z)}
            for o in ds.observations
        ],
    }


def dataset_from_json(obj) -> CureDataset:
    if isinstance(obj, (str, Path)):
        obj = json.loads(Path(obj).read_text())
    obs = []
    for rec in obj["observations"]:
        right = math.inf if rec["right"] == "inf" else float(rec["right"])
        obs.append(IntervalObservation(float(rec["left"]), right, int(rec["delta_l"]), int(rec["delta_i"]),
                                       int(rec["delta_r"]), tuple(rec["x"]), tuple(rec["z"])))
    return CureDataset(tuple(obs), int(obj["d1"]), int(obj["d2"]))


def standardize(ds: CureDataset):
    """Z-score the covariates.

    Returns
    -------
    CureDataset
    dict
        ``{"x_mean", "x_sd", "z_mean", "z_sd"}`` lists, recorded in fit output.
        Zero-variance columns are left unscaled (sd reported as 1).
    """
    def _ms(a):
        if a.shape[1] == 0:
            return np.zeros(0), np.ones(0)
        m, s = a.mean(axis=0), a.std(axis=0, ddof=1) if a.shape[0] > 1 else np.ones(a.shape[1])
        s = np.where(s > 0, s, 1.0)
        return m, s

    xm, xs = _ms(ds.X)
    zm, zs = _ms(ds.Z)
    out = CureDataset.from_arrays(ds.left, ds.right, (ds.X - xm) / xs, (ds.Z - zm) / zs)
    info = {"x_mean": xm.tolist(), "x_sd": xs.tolist(), "z_mean": zm.tolist(), "z_sd": zs.tolist()}
    return out, info


def train_valid_split(ds: CureDataset, frac_train: float = 2 / 3, seed: int = 0):
    """Seeded random split into disjoint train and validation sets."""
    if not 0 < frac_train < 1:
        raise ValueError("frac_train must be in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ds.n)
    n_train = int(round(frac_train * ds.n))
    if n_train < 1 or n_train >= ds.n:
        raise ValueError("split leaves an empty part")
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))
