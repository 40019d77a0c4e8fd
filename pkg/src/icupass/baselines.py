"""Age-only comparators: the age-normal lookup table and the per-vital
polynomial regression on standardized age."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cohort import DEFAULT_VITALS
from .io import read_json, write_json

POLY_FORMAT = "icupass.polynomial"
POLY_VERSION = 1
SELECTION_SLACK = 1.005
# validation errors this small relative to the target spread count as ties
SELECTION_ATOL = 1e-6


# --- age-normal lookup ------------------------------------------------------------


@dataclass(frozen=True)
class AgeBin:
    lo: float  # months, inclusive
    hi: float  # months, exclusive; inf for the final bin
    value: float
    range_lo: float
    range_hi: float

    @property
    def label(self) -> str:
        return f"{self.lo:g}+ mo" if math.isinf(self.hi) else f"{self.lo:g}-{self.hi:g} mo"

    def contains(self, age_months: float) -> bool:
        return self.lo <= age_months < self.hi


@dataclass(frozen=True)
class AgeNormalTable:
    bins: Mapping[str, tuple[AgeBin, ...]]

    def __post_init__(self):
        for vital, bins in self.bins.items():
            if not bins or bins[0].lo != 0:
                raise ValueError(f"{vital}: bins must start at 0 months")
            for a, b in zip(bins, bins[1:]):
                if a.hi != b.lo:
                    raise ValueError(f"{vital}: bins not contiguous at {a.hi} / {b.lo}")
            if not math.isinf(bins[-1].hi):
                raise ValueError(f"{vital}: final bin must be open-ended")
            for b in bins:
                if not (b.range_lo <= b.value <= b.range_hi):
                    raise ValueError(f"{vital}: value {b.value} outside [{b.range_lo}, {b.range_hi}]")

    def edges(self, vital: str) -> list[float]:
        return [b.lo for b in self.bins[vital]]


def parse_age_normal_table(text: str) -> AgeNormalTable:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    bins: dict[str, list[AgeBin]] = {}
    for row in csv.DictReader(io.StringIO("\n".join(lines))):
        lo, hi = float(row["range_lo"]), float(row["range_hi"])
        value = row.get("value", "").strip()
        age_hi = row["age_hi_months"].strip()
        bins.setdefault(row["vital"].strip(), []).append(
            AgeBin(
                lo=float(row["age_lo_months"]),
                hi=math.inf if age_hi in ("", "inf") else float(age_hi),
                value=float(value) if value else (lo + hi) / 2.0,
                range_lo=lo,
                range_hi=hi,
            )
        )
    return AgeNormalTable({k: tuple(sorted(v, key=lambda b: b.lo)) for k, v in bins.items()})


def load_age_normal_table(path: str | os.PathLike | None = None) -> AgeNormalTable:
    """Load a table file; ``None`` loads the bundled fixture."""
    if path is None:
        text = resources.files("icupass").joinpath("data/age_normal_fixture.csv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return parse_age_normal_table(text)


def age_normal_text(table: AgeNormalTable) -> str:
    out = ["vital,age_lo_months,age_hi_months,range_lo,range_hi,value"]
    for vital, bins in table.bins.items():
        for b in bins:
            hi = "" if math.isinf(b.hi) else repr(b.hi)
            out.append(f"{vital},{b.lo!r},{hi},{b.range_lo!r},{b.range_hi!r},{b.value!r}")
    return "\n".join(out) + "\n"


def find_bin(bins: Sequence[AgeBin], age_months: float) -> AgeBin:
    if age_months < 0:
        raise ValueError(f"age must be non-negative, got {age_months}")
    lows = [b.lo for b in bins]
    # half-open bins: an age on a boundary belongs to the upper bin
    i = int(np.searchsorted(lows, age_months, side="right")) - 1
    return bins[i]


def lookup_age_normal(table: AgeNormalTable, vital: str, age_months: float) -> float:
    return find_bin(table.bins[vital], age_months).value


def predict_age_normal(table: AgeNormalTable, age_months: float, vitals=DEFAULT_VITALS) -> tuple[float, ...]:
    return tuple(lookup_age_normal(table, v, age_months) for v in vitals)


# --- polynomial regression -----------------------------------------------------------


class RankDeficientError(ValueError):
    pass


@dataclass(frozen=True)
class PolynomialFit:
    """One vital's polynomial over standardized age z = (age - mean) / std."""

    degree: int
    coefficients: np.ndarray  # c_0 .. c_d
    age_mean: float
    age_std: float
    age_min: float
    age_max: float
    trace: tuple[dict, ...] = ()

    def __call__(self, age_months):
        age = np.clip(np.asarray(age_months, dtype=float), self.age_min, self.age_max)
        z = (age - self.age_mean) / self.age_std
        return np.polynomial.polynomial.polyval(z, self.coefficients)

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "coefficients": self.coefficients.tolist(),
            "age_mean": self.age_mean,
            "age_std": self.age_std,
            "age_min": self.age_min,
            "age_max": self.age_max,
            "trace": list(self.trace),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PolynomialFit":
        return cls(
            int(d["degree"]),
            np.asarray(d["coefficients"], dtype=float),
            float(d["age_mean"]),
            float(d["age_std"]),
            float(d["age_min"]),
            float(d["age_max"]),
            tuple(d.get("trace", ())),
        )


@dataclass(frozen=True)
class PolynomialModel:
    fits: Mapping[str, PolynomialFit] = field(default_factory=dict)


def design_matrix(z: np.ndarray, degree: int) -> np.ndarray:
    return np.vander(np.asarray(z, dtype=float), degree + 1, increasing=True)


def ridge_lstsq(X: np.ndarray, y: np.ndarray, ridge: float) -> np.ndarray:
    """min ||X c - y||^2 + ridge ||c[1:]||^2 via Householder QR of the stacked
    system; the intercept column (first) is not penalized."""
    p = X.shape[1]
    penalty = math.sqrt(ridge) * np.eye(p)[1:]
    A = np.vstack([X, penalty]) if ridge > 0 else X
    rhs = np.concatenate([y, np.zeros(p - 1)]) if ridge > 0 else y
    Q, R = np.linalg.qr(A, mode="reduced")
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-13 * max(diag.max(), 1.0):
        raise RankDeficientError("design matrix is rank deficient even with the ridge term")
    return _back_substitute(R, Q.T @ rhs)


def _back_substitute(R: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = R.shape[0]
    x = np.zeros(n)
    for i in range(n - 1, -1, -1):
        x[i] = (b[i] - R[i, i + 1 :] @ x[i + 1 :]) / R[i, i]
    return x


def _rmse(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def fit_polynomial(
    train_points: Sequence[tuple[float, float]],
    val_points: Sequence[tuple[float, float]],
    degree_range: Sequence[int] = range(1, 9),
    ridge: float = 1e-8,
) -> PolynomialFit:
    """Fit every candidate degree on train, score on validation, and keep the
    smallest degree within 0.5% of the best validation rMSE."""
    train = np.asarray(train_points, dtype=float).reshape(-1, 2)
    val = np.asarray(val_points, dtype=float).reshape(-1, 2)
    if len(val) == 0:
        raise ValueError("validation points are empty")
    age, y = train[:, 0], train[:, 1]
    mean, std = float(age.mean()), float(age.std())
    if not std > 0:
        raise ValueError("train ages have zero spread")
    lo, hi = float(age.min()), float(age.max())
    z = (age - mean) / std
    z_val = (np.clip(val[:, 0], lo, hi) - mean) / std
    n_distinct = len(np.unique(age))

    trace, candidates = [], {}
    for d in degree_range:
        if d < 1:
            raise ValueError("degrees must be >= 1")
        if n_distinct < d + 1:
            trace.append({"degree": d, "skipped": f"only {n_distinct} distinct ages"})
            continue
        coef = ridge_lstsq(design_matrix(z, d), y, ridge)
        val_rmse = _rmse(np.polynomial.polynomial.polyval(z_val, coef), val[:, 1])
        train_rmse = _rmse(np.polynomial.polynomial.polyval(z, coef), y)
        trace.append({"degree": d, "train_rmse": train_rmse, "val_rmse": val_rmse})
        candidates[d] = (coef, val_rmse)
    if not candidates:
        raise ValueError("no candidate degree could be fitted")
    best = min(v for _, v in candidates.values())
    cutoff = SELECTION_SLACK * best + SELECTION_ATOL * max(float(y.std()), 1.0)
    chosen = min(d for d, (_, v) in candidates.items() if v <= cutoff)
    return PolynomialFit(chosen, candidates[chosen][0], mean, std, lo, hi, tuple(trace))


def fit_polynomial_model(
    train_ages: Sequence[float],
    train_targets: np.ndarray,
    val_ages: Sequence[float],
    val_targets: np.ndarray,
    degree_range: Sequence[int] = range(1, 9),
    ridge: float = 1e-8,
    vitals: Sequence[str] = DEFAULT_VITALS,
) -> PolynomialModel:
    train_targets = np.asarray(train_targets, dtype=float)
    val_targets = np.asarray(val_targets, dtype=float)
    fits = {}
    for k, vital in enumerate(vitals):
        fits[vital] = fit_polynomial(
            list(zip(train_ages, train_targets[:, k])),
            list(zip(val_ages, val_targets[:, k])),
            degree_range,
            ridge,
        )
    return PolynomialModel(fits)


def predict_polynomial(
    model: PolynomialModel, age_months: float, vitals: Sequence[str] = DEFAULT_VITALS
) -> tuple[float, ...]:
    return tuple(float(model.fits[v](age_months)) for v in vitals)


def save_polynomial(path: str | os.PathLike, model: PolynomialModel) -> Path:
    return write_json(
        path,
        {"format": POLY_FORMAT, "version": POLY_VERSION, "vitals": {k: f.to_dict() for k, f in model.fits.items()}},
    )


def load_polynomial(path: str | os.PathLike) -> PolynomialModel:
    d = read_json(path)
    if d.get("format") != POLY_FORMAT or d.get("version") != POLY_VERSION:
        raise ValueError(f"{path}: not a version-{POLY_VERSION} polynomial model")
    return PolynomialModel({k: PolynomialFit.from_dict(v) for k, v in d["vitals"].items()})
