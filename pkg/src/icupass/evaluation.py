"""Error metrics, one-way ANOVA and stratified evaluation reports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .cohort import DEFAULT_VITALS, Episode
from .targets import PassTargets

BASELINE_LABEL = "age_normal"
MODEL_ORDER = ("age_normal", "regression", "rnn_12h", "rnn_pmd")


def _pairs(actual, predicted) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(actual, dtype=float).ravel()
    p = np.asarray(predicted, dtype=float).ravel()
    if a.shape != p.shape:
        raise ValueError("actual and predicted differ in length")
    if a.size == 0:
        raise ValueError("empty error set")
    return a, p


def rmse(actual, predicted) -> float:
    a, p = _pairs(actual, predicted)
    return math.sqrt(float(np.mean((a - p) ** 2)))


def rmse_literal(actual, predicted) -> float:
    """(1/N) * sqrt(sum of squared errors): the displayed-formula variant, kept for audit only."""
    a, p = _pairs(actual, predicted)
    return math.sqrt(float(np.sum((a - p) ** 2))) / a.size


def mae(actual, predicted) -> float:
    a, p = _pairs(actual, predicted)
    return float(np.mean(np.abs(a - p)))


# --- regularized incomplete beta / F tail -------------------------------------------------


def _beta_cf(a: float, b: float, x: float, max_iter: int = 500, tol: float = 1e-15) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x <= 0:
        return 0.0
    if x >= 1:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def f_sf(f: float, df1: float, df2: float) -> float:
    """Upper tail P(F > f) of the F(df1, df2) distribution."""
    if f <= 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    return betainc(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f))


class AnovaResult(NamedTuple):
    f: float
    df_between: int
    df_within: int
    p: float
    degenerate: bool = False


def anova_f(groups: Sequence[Sequence[float]]) -> AnovaResult:
    """One-way ANOVA F = MS_between / MS_within with an F-distribution p-value."""
    gs = [np.asarray(g, dtype=float).ravel() for g in groups]
    k = len(gs)
    n = sum(g.size for g in gs)
    if k < 2 or any(g.size < 2 for g in gs) or n <= k:
        raise ValueError("need at least 2 groups of size >= 2")
    grand = np.concatenate(gs).mean()
    ss_between = float(sum(g.size * (g.mean() - grand) ** 2 for g in gs))
    ss_within = float(sum(np.sum((g - g.mean()) ** 2) for g in gs))
    df_b, df_w = k - 1, n - k
    scale = max(float(np.max(np.abs(np.concatenate(gs) - grand))), 1e-300)
    if ss_within <= 1e-24 * scale**2 * n:
        if ss_between <= 1e-24 * scale**2 * n:
            return AnovaResult(0.0, df_b, df_w, 1.0, True)
        return AnovaResult(math.inf, df_b, df_w, 0.0, True)
    f = (ss_between / df_b) / (ss_within / df_w)
    return AnovaResult(f, df_b, df_w, f_sf(f, df_b, df_w))


# --- stratified report ------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictionSet:
    label: str
    predictions: Mapping[str, tuple[float, float, float]]

    def matrix(self, episode_ids: Sequence[str]) -> np.ndarray:
        return np.array([self.predictions[e] for e in episode_ids], dtype=float).reshape(len(episode_ids), 3)


@dataclass(frozen=True)
class ReportRow:
    model: str
    vital: str
    stratum_kind: str
    stratum_label: str
    n: int
    rmse: float | None
    mae: float | None
    rmse_literal: float | None = None


@dataclass(frozen=True)
class AnovaRow:
    vital: str
    model: str
    baseline: str
    f: float
    df_between: int
    df_within: int
    p: float
    degenerate: bool


@dataclass
class EvaluationReport:
    rows: list[ReportRow]
    anova: list[AnovaRow]
    n_partition: int
    pim2_cuts: tuple[float, float, float] | None
    models: tuple[str, ...]
    notes: list[str] = field(default_factory=list)

    def select(self, **match) -> list[ReportRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]

    def overall(self, model: str, vital: str) -> ReportRow:
        return self.select(model=model, vital=vital, stratum_kind="overall")[0]


def age_bin_label(lo: float, hi: float) -> str:
    return f"{lo:g}+ mo" if math.isinf(hi) else f"{lo:g}-{hi:g} mo"


def _age_strata(edges: Sequence[float], ages: np.ndarray) -> list[tuple[str, np.ndarray]]:
    edges = list(edges)
    bounds = edges + [math.inf]
    return [(age_bin_label(lo, hi), (ages >= lo) & (ages < hi)) for lo, hi in zip(bounds, bounds[1:])]


def pim2_quartile_cuts(values: Sequence[float]) -> tuple[float, float, float]:
    return tuple(float(q) for q in np.quantile(np.asarray(values, dtype=float), [0.25, 0.5, 0.75]))


def _metric_row(model, vital, kind, label, actual, pred, literal) -> ReportRow:
    if actual.size == 0:
        return ReportRow(model, vital, kind, label, 0, None, None, None)
    return ReportRow(
        model, vital, kind, label, int(actual.size), rmse(actual, pred), mae(actual, pred),
        rmse_literal(actual, pred) if literal else None,
    )


def stratified_report(
    episodes: Sequence[Episode],
    actual: Mapping[str, PassTargets],
    predictions: Sequence[PredictionSet],
    age_bins: Mapping[str, Sequence[float]],
    baseline: str = BASELINE_LABEL,
    audit_literal_rmse: bool = False,
    vitals: Sequence[str] = DEFAULT_VITALS,
) -> EvaluationReport:
    """Overall and stratified rMSE/MAE per (model, vital) plus ANOVA of each
    model's absolute errors against the baseline's.

    ``age_bins`` maps each vital to the lower edges (months) of its bins; the
    last bin is open-ended. PIM2 quartile cut points come from ``episodes``.
    """
    ids = [e.episode_id for e in episodes]
    for ps in predictions:
        missing = set(ids) - set(ps.predictions)
        if missing:
            raise ValueError(f"predictions {ps.label!r} miss {len(missing)} partition episode(s)")
    Y = np.array([actual[e].as_array() for e in ids]).reshape(len(ids), 3)
    ages = np.array([e.age_months for e in episodes], dtype=float)
    diagnoses = [e.diagnosis for e in episodes]
    pim2 = np.array([np.nan if e.pim2 is None else e.pim2 for e in episodes], dtype=float)

    has_pim2 = ~np.isnan(pim2)
    cuts = pim2_quartile_cuts(pim2[has_pim2]) if has_pim2.any() else None
    pim2_strata = []
    if cuts is not None:
        q = np.searchsorted(np.asarray(cuts), np.where(has_pim2, pim2, 0.0), side="left")
        labels = ("Q1", "Q2", "Q3", "Q4")
        pim2_strata = [(labels[k], has_pim2 & (q == k)) for k in range(4)]
    diag_labels = sorted({d for d in diagnoses if d is not None})
    diag_arr = np.array([d if d is not None else "" for d in diagnoses], dtype=object)
    diag_strata = [(d, diag_arr == d) for d in diag_labels]

    rows: list[ReportRow] = []
    anova: list[AnovaRow] = []
    pred_mats = {ps.label: ps.matrix(ids) for ps in predictions}
    for k, vital in enumerate(vitals):
        strata = [("overall", "all", np.ones(len(ids), dtype=bool))]
        strata += [("age_bin", lab, m) for lab, m in _age_strata(age_bins[vital], ages)]
        strata += [("diagnosis", lab, m) for lab, m in diag_strata]
        strata += [("pim2_quartile", lab, m) for lab, m in pim2_strata]
        for ps in predictions:
            P = pred_mats[ps.label]
            for kind, label, m in strata:
                rows.append(_metric_row(ps.label, vital, kind, label, Y[m, k], P[m, k], audit_literal_rmse))
        if baseline in pred_mats and len(ids) >= 2:
            base_err = np.abs(Y[:, k] - pred_mats[baseline][:, k])
            for ps in predictions:
                if ps.label == baseline:
                    continue
                res = anova_f([base_err, np.abs(Y[:, k] - pred_mats[ps.label][:, k])])
                anova.append(AnovaRow(vital, ps.label, baseline, *res))
    notes = [
        "rmse = sqrt(mean squared error)",
        "anova compares per-episode absolute errors of each model against the baseline",
        "pim2 quartile cut points computed on the evaluated partition",
    ]
    return EvaluationReport(rows, anova, len(ids), cuts, tuple(ps.label for ps in predictions), notes)
