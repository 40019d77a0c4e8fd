"""Serialized forms of an evaluation report and plot-ready data files."""

from __future__ import annotations

import json
import math
from typing import Mapping, Sequence

import numpy as np

from .baselines import AgeNormalTable, PolynomialFit
from .evaluation import EvaluationReport, ReportRow
from .io import table_text

VITAL_TITLES = {"hr": "Heart Rate (bpm)", "sbp": "Systolic BP (mm Hg)", "dbp": "Diastolic BP (mm Hg)"}
MODEL_TITLES = {"age_normal": "Age-Normal", "regression": "Regression", "rnn_12h": "RNN_12h", "rnn_pmd": "RNN_PMD"}
ROWS_HEADER = ("model", "vital", "stratum_kind", "stratum_label", "N", "rmse", "mae")
ANOVA_HEADER = ("vital", "model", "baseline", "F", "df_between", "df_within", "p", "degenerate")


def rows_text(report: EvaluationReport) -> str:
    literal = any(r.rmse_literal is not None for r in report.rows)
    header = ROWS_HEADER + (("rmse_literal",) if literal else ())

    def cells(r: ReportRow):
        base = (r.model, r.vital, r.stratum_kind, r.stratum_label, r.n, r.rmse, r.mae)
        return base + ((r.rmse_literal,) if literal else ())

    return table_text(header, (cells(r) for r in report.rows))


def anova_text(report: EvaluationReport) -> str:
    return table_text(
        ANOVA_HEADER,
        ((a.vital, a.model, a.baseline, a.f, a.df_between, a.df_within, a.p, int(a.degenerate)) for a in report.anova),
    )


def summary_json(report: EvaluationReport) -> str:
    d = {
        "n_partition": report.n_partition,
        "models": list(report.models),
        "pim2_quartile_cuts": list(report.pim2_cuts) if report.pim2_cuts else None,
        "notes": report.notes,
        "overall": {
            m: {v: {"rmse": report.overall(m, v).rmse, "mae": report.overall(m, v).mae} for v in VITAL_TITLES}
            for m in report.models
        },
    }
    return json.dumps(d, indent=1, sort_keys=True) + "\n"


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.1f}"


def overall_table(report: EvaluationReport, vitals: Sequence[str] = ("hr", "sbp", "dbp")) -> str:
    """Aligned plain-text table: one row per model, rMSE/MAE per vital."""
    name_w = max(len(MODEL_TITLES.get(m, m)) for m in report.models) + 2
    col_w = 10
    head1 = " " * name_w + "".join(VITAL_TITLES.get(v, v).center(2 * col_w) for v in vitals)
    head2 = " " * name_w + ("rMSE".rjust(col_w) + "MAE".rjust(col_w)) * len(vitals)
    lines = [f"12th-hour errors on {report.n_partition} episodes", head1, head2, "-" * len(head2)]
    for m in report.models:
        cells = []
        for v in vitals:
            r = report.overall(m, v)
            cells.append(_fmt(r.rmse).rjust(col_w) + _fmt(r.mae).rjust(col_w))
        lines.append(MODEL_TITLES.get(m, m).ljust(name_w) + "".join(cells))
    if report.anova:
        lines.append("")
        lines.append("ANOVA of absolute errors vs " + MODEL_TITLES.get(report.anova[0].baseline, report.anova[0].baseline))
        for a in report.anova:
            lines.append(
                f"  {a.vital:<4} {MODEL_TITLES.get(a.model, a.model):<12} F={a.f:.3f} "
                f"df=({a.df_between},{a.df_within}) p={a.p:.3g}"
            )
    return "\n".join(lines) + "\n"


def strata_table(report: EvaluationReport, vital: str, kind: str) -> str:
    rows = report.select(vital=vital, stratum_kind=kind)
    labels = list(dict.fromkeys(r.stratum_label for r in rows))
    if not labels:
        return ""
    name_w = max(len(MODEL_TITLES.get(m, m)) for m in report.models) + 2
    col_w = max(12, max(len(lab) for lab in labels) + 2)
    n_of = {r.stratum_label: r.n for r in rows}
    lines = [
        f"{VITAL_TITLES.get(vital, vital)} by {kind.replace('_', ' ')} (rMSE / MAE)",
        " " * name_w + "".join(lab.rjust(col_w) for lab in labels),
        " " * name_w + "".join(f"N={n_of[lab]}".rjust(col_w) for lab in labels),
    ]
    for m in report.models:
        by = {r.stratum_label: r for r in rows if r.model == m}
        cells = [f"{_fmt(by[lab].rmse)}/{_fmt(by[lab].mae)}".rjust(col_w) for lab in labels]
        lines.append(MODEL_TITLES.get(m, m).ljust(name_w) + "".join(cells))
    return "\n".join(lines) + "\n"


def full_text_report(report: EvaluationReport) -> str:
    parts = [overall_table(report)]
    for vital in ("hr", "sbp", "dbp"):
        for kind in ("age_bin", "diagnosis", "pim2_quartile"):
            t = strata_table(report, vital, kind)
            if t:
                parts.append(t)
    if report.pim2_cuts:
        parts.append("PIM2 quartile cut points: " + ", ".join(f"{c:.4g}" for c in report.pim2_cuts) + "\n")
    return "\n".join(parts)


def plot_data_text(
    vital: str,
    scatter: Sequence[tuple[float, float]],
    fit: PolynomialFit,
    table: AgeNormalTable,
    n_curve: int = 200,
    age_max: float | None = None,
) -> str:
    """One table per vital: PASS scatter, regression curve, age-normal step function."""
    rows = [("scatter", a, v, None, None) for a, v in sorted(scatter)]
    hi = age_max if age_max is not None else fit.age_max
    for a in np.linspace(0.0, hi, n_curve):
        rows.append(("regression", float(a), float(fit(a)), None, None))
    for b in table.bins[vital]:
        right = hi if math.isinf(b.hi) else b.hi
        rows.append(("age_normal", b.lo, b.value, b.range_lo, b.range_hi))
        rows.append(("age_normal", right, b.value, b.range_lo, b.range_hi))
    return table_text(("series", "age_months", "value", "range_lo", "range_hi"), rows)


def age_bins_from_table(table: AgeNormalTable) -> Mapping[str, list[float]]:
    return {v: table.edges(v) for v in table.bins}
