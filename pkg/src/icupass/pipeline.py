"""Pipeline stages and their artifact manifests.

Every stage reads named artifacts, verifies them against the manifest of the
stage that produced them, writes its outputs atomically and records a
manifest of its own (input digests, output digests, config digest, seeds,
tool version). Reruns with unchanged inputs reproduce every byte.
"""

from __future__ import annotations

import json
import logging
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .baselines import (
    age_normal_text,
    fit_polynomial_model,
    load_age_normal_table,
    load_polynomial,
    parse_age_normal_table,
    predict_age_normal,
    predict_polynomial,
    save_polynomial,
)
from .cohort import (
    PARTITIONS,
    Cohort,
    catalog_text,
    cohort_text,
    exclusion_counts,
    filter_eligible,
    load_cohort,
    load_split,
    split_by_patient,
    split_text,
)
from .config import RunConfig
from .evaluation import AnovaRow, EvaluationReport, PredictionSet, ReportRow, stratified_report
from .featurize import NormStats, build_matrix, fit_norm_stats, matrix_text
from .io import atomic_write_text, file_digest, read_json, read_table, table_text, text_digest, write_json
from .reporting import age_bins_from_table, anova_text, full_text_report, plot_data_text, rows_text, summary_json
from .rnn import grid_search, load_model, predict_many, save_model, train
from .synth import generate
from .targets import compute_pass, load_targets, targets_text

log = logging.getLogger(__name__)

STAGES = ("synth", "split", "featurize", "fit-baselines", "train", "predict", "evaluate", "report")
MODEL_LABELS = ("age_normal", "regression", "rnn_12h", "rnn_pmd")
PREDICTION_FILES = tuple(f"predictions/{m}.csv" for m in MODEL_LABELS)
PLOT_FILES = tuple(f"plots/age_curve_{v}.csv" for v in ("hr", "sbp", "dbp"))

# artifact (relative to the output directory) -> producing stage
PRODUCER = {
    "cohort.jsonl": "synth",
    "catalog.csv": "synth",
    "oracle_targets.csv": "synth",
    "split.csv": "split",
    "filter_counts.json": "split",
    "norm_stats.json": "featurize",
    "targets.csv": "featurize",
    "age_normal.csv": "fit-baselines",
    "polynomial.json": "fit-baselines",
    "rnn_pmd.json": "train",
    "rnn_12h.json": "train",
    **{p: "predict" for p in PREDICTION_FILES},
    "report_rows.csv": "evaluate",
    "anova.csv": "evaluate",
    "report_summary.json": "evaluate",
    "report.txt": "report",
    **{p: "report" for p in PLOT_FILES},
}


class PipelineError(RuntimeError):
    pass


class MissingArtifactError(PipelineError):
    pass


class TamperedArtifactError(PipelineError):
    pass


class Pipeline:
    def __init__(self, config: RunConfig):
        self.cfg = config
        self.out = config.out_dir

    # --- artifact bookkeeping ---------------------------------------------------------

    def path(self, name: str) -> Path:
        if name == "cohort.jsonl":
            return self.cfg.cohort_path
        if name == "catalog.csv":
            return self.cfg.catalog_path
        return self.out / name

    def manifest_path(self, stage: str) -> Path:
        return self.out / "manifests" / f"{stage}.json"

    def require(self, *names: str) -> None:
        for name in names:
            p = self.path(name)
            if not p.exists():
                producer = PRODUCER.get(name, "?")
                raise MissingArtifactError(f"missing artifact {p} (produced by stage '{producer}')")
            producer = PRODUCER.get(name)
            mpath = self.manifest_path(producer) if producer else None
            if mpath is None or not mpath.exists():
                continue  # externally supplied input
            recorded = read_json(mpath)["outputs"].get(name)
            if recorded is not None and recorded != file_digest(p):
                raise TamperedArtifactError(
                    f"{p} does not match the digest recorded by stage '{producer}'; rerun that stage"
                )

    def _write(self, outputs: dict[str, str], name: str, text: str) -> None:
        atomic_write_text(self.path(name), text)
        outputs[name] = text_digest(text)

    def _manifest(self, stage: str, inputs: tuple[str, ...], outputs: dict[str, str]) -> None:
        write_json(
            self.manifest_path(stage),
            {
                "stage": stage,
                "tool_version": __version__,
                "config_digest": text_digest(self.cfg.digest_text()),
                "seeds": self._seeds(),
                "inputs": {n: file_digest(self.path(n)) for n in inputs},
                "outputs": dict(sorted(outputs.items())),
            },
        )

    def _seeds(self) -> dict:
        return {
            "synth": self.cfg.synth.seed if self.cfg.synth else None,
            "split": self.cfg.split.seed,
            "rnn_pmd": self.cfg.rnn.pmd.seed,
            "rnn_12h": self.cfg.rnn.h12.seed,
        }

    # --- shared loaders -------------------------------------------------------------------

    @cached_property
    def cohort(self) -> Cohort:
        return load_cohort(self.cfg.cohort_path, self.cfg.catalog_path)

    @cached_property
    def split(self):
        return load_split(self.path("split.csv"))

    @cached_property
    def eligible(self) -> Cohort:
        return self.cohort.subset(self.split.partition_of)

    def partition(self, name: str):
        ids = set(self.split.episode_ids(name))
        return [e for e in self.eligible.episodes if e.episode_id in ids]

    @cached_property
    def stats(self) -> NormStats:
        return NormStats.from_dict(read_json(self.path("norm_stats.json")))

    @cached_property
    def targets(self):
        return load_targets(self.path("targets.csv"))

    def target_array(self, episodes) -> np.ndarray:
        return np.array([self.targets[e.episode_id].as_array() for e in episodes]).reshape(len(episodes), 3)

    @cached_property
    def age_table(self):
        return parse_age_normal_table(self.path("age_normal.csv").read_text(encoding="utf-8"))

    # --- stages ---------------------------------------------------------------------------------

    def stage_synth(self) -> None:
        if self.cfg.synth is None:
            raise PipelineError("no synth settings in the config; supply cohort and catalog files instead")
        syn = generate(self.cfg.synth)
        out: dict[str, str] = {}
        self._write(out, "cohort.jsonl", cohort_text(syn.cohort))
        self._write(out, "catalog.csv", catalog_text(syn.cohort.catalog))
        self._write(out, "oracle_targets.csv", targets_text(syn.truth.values()))
        self._manifest("synth", (), out)

    def stage_split(self) -> None:
        inputs = ("cohort.jsonl", "catalog.csv")
        self.require(*inputs)
        f = self.cfg.filter
        thresholds = dict(min_window_measurements=f.min_window_measurements, min_duration_hr=f.min_duration_hr)
        eligible = filter_eligible(self.cohort, f.vitals, **thresholds)
        counts = exclusion_counts(self.cohort, f.vitals, **thresholds)
        split = split_by_patient(eligible, self.cfg.split.fractions, self.cfg.split.seed)
        _check_no_leakage(eligible, split)
        out: dict[str, str] = {}
        self._write(out, "split.csv", split_text(split))
        summary = {"exclusions": counts, "partitions": split.counts(),
                   "patients": {p: len({eligible.by_id[e].patient_id for e in split.episode_ids(p)}) for p in PARTITIONS}}
        self._write(out, "filter_counts.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
        self._manifest("split", inputs, out)

    def stage_featurize(self) -> None:
        inputs = ("cohort.jsonl", "catalog.csv", "split.csv")
        self.require(*inputs)
        stats = fit_norm_stats(self.eligible, self.split)
        tgts = [compute_pass(e, self.cfg.filter.vitals) for e in self.eligible.episodes]
        _check_finite("targets", np.array([t.as_array() for t in tgts]))
        out: dict[str, str] = {}
        self._write(out, "norm_stats.json", json.dumps(stats.to_dict(), indent=1, sort_keys=True) + "\n")
        self._write(out, "targets.csv", targets_text(tgts))
        if self.cfg.dump_matrices:
            for e in self.eligible.episodes:
                m = build_matrix(e, e.medical_discharge_hr, stats, self.cfg.grid_step_hr)
                self._write(out, f"matrices/{e.episode_id}.txt", matrix_text(m))
        self._manifest("featurize", inputs, out)

    def stage_fit_baselines(self) -> None:
        inputs = ("cohort.jsonl", "catalog.csv", "split.csv", "targets.csv")
        self.require(*inputs)
        b = self.cfg.baselines
        table = load_age_normal_table(b.age_normal_table)
        train_eps, val_eps = self.partition("train"), self.partition("validation")
        model = fit_polynomial_model(
            [e.age_months for e in train_eps], self.target_array(train_eps),
            [e.age_months for e in val_eps], self.target_array(val_eps),
            range(b.degree_min, b.degree_max + 1), b.ridge, self.cfg.filter.vitals,
        )
        for fit in model.fits.values():
            _check_finite("polynomial coefficients", fit.coefficients)
        out: dict[str, str] = {}
        self._write(out, "age_normal.csv", age_normal_text(table))
        save_polynomial(self.path("polynomial.json"), model)
        out["polynomial.json"] = file_digest(self.path("polynomial.json"))
        self._manifest("fit-baselines", inputs, out)

    def stage_train(self) -> None:
        inputs = ("cohort.jsonl", "catalog.csv", "split.csv", "norm_stats.json", "targets.csv")
        self.require(*inputs)
        train_eps, val_eps = self.partition("train"), self.partition("validation")
        y_train, y_val = self.target_array(train_eps), self.target_array(val_eps)
        out: dict[str, str] = {}
        for name, tc in (("rnn_pmd.json", self.cfg.rnn.pmd), ("rnn_12h.json", self.cfg.rnn.h12)):
            if self.cfg.rnn.search:
                model = grid_search(
                    train_eps, y_train, val_eps, y_val, self.stats, tc,
                    self.cfg.rnn.hidden_sizes, self.cfg.rnn.learning_rates, self.cfg.grid_step_hr,
                )
            else:
                model = train(train_eps, y_train, val_eps, y_val, self.stats, tc, self.cfg.grid_step_hr)
            if not model.params.is_finite():
                raise PipelineError(f"{name}: non-finite parameters")
            save_model(self.path(name), model)
            out[name] = file_digest(self.path(name))
        self._manifest("train", inputs, out)

    def stage_predict(self) -> None:
        models = ("age_normal.csv", "polynomial.json", "rnn_pmd.json", "rnn_12h.json")
        inputs = ("cohort.jsonl", "catalog.csv", "split.csv", "norm_stats.json") + models
        self.require(*inputs)
        eps = self.partition(self.cfg.evaluation.partition)
        vitals = self.cfg.filter.vitals
        poly = load_polynomial(self.path("polynomial.json"))
        preds = {
            "age_normal": np.array([predict_age_normal(self.age_table, e.age_months, vitals) for e in eps]),
            "regression": np.array([predict_polynomial(poly, e.age_months, vitals) for e in eps]),
            "rnn_12h": predict_many(load_model(self.path("rnn_12h.json")), eps, self.stats),
            "rnn_pmd": predict_many(load_model(self.path("rnn_pmd.json")), eps, self.stats),
        }
        out: dict[str, str] = {}
        for label, P in preds.items():
            P = P.reshape(len(eps), 3)
            _check_finite(f"{label} predictions", P)
            rows = ((e.episode_id, *map(float, p)) for e, p in zip(eps, P))
            self._write(out, f"predictions/{label}.csv", table_text(("episode_id", "mu_hr", "mu_sbp", "mu_dbp"), rows))
        self._manifest("predict", inputs, out)

    def _evaluation_report(self) -> EvaluationReport:
        eps = self.partition(self.cfg.evaluation.partition)
        sets = [load_prediction_set(self.path(p), m) for m, p in zip(MODEL_LABELS, PREDICTION_FILES)]
        bins = self.cfg.evaluation.age_bins or age_bins_from_table(self.age_table)
        return stratified_report(
            eps, self.targets, sets, bins,
            audit_literal_rmse=self.cfg.evaluation.audit_literal_rmse, vitals=self.cfg.filter.vitals,
        )

    def stage_evaluate(self) -> None:
        models = ("age_normal.csv", "polynomial.json", "rnn_pmd.json", "rnn_12h.json")
        inputs = ("cohort.jsonl", "catalog.csv", "split.csv", "targets.csv") + models + PREDICTION_FILES
        self.require(*inputs)
        report = self._evaluation_report()
        for r in report.rows:
            if r.n and r.rmse < r.mae - 1e-12:
                raise PipelineError(f"invariant violated: rmse < mae for {r}")
        out: dict[str, str] = {}
        self._write(out, "report_rows.csv", rows_text(report))
        self._write(out, "anova.csv", anova_text(report))
        self._write(out, "report_summary.json", summary_json(report))
        self._manifest("evaluate", inputs, out)

    def stage_report(self) -> None:
        inputs = ("cohort.jsonl", "catalog.csv", "split.csv", "targets.csv", "age_normal.csv",
                  "polynomial.json", "report_rows.csv", "anova.csv", "report_summary.json")
        self.require(*inputs)
        report = load_report(self.path("report_rows.csv"), self.path("anova.csv"), self.path("report_summary.json"))
        out: dict[str, str] = {}
        self._write(out, "report.txt", full_text_report(report))
        poly = load_polynomial(self.path("polynomial.json"))
        train_eps = self.partition("train")
        for k, (vital, name) in enumerate(zip(("hr", "sbp", "dbp"), PLOT_FILES)):
            scatter = [(e.age_months, float(self.targets[e.episode_id].as_array()[k])) for e in train_eps]
            self._write(out, name, plot_data_text(vital, scatter, poly.fits[vital], self.age_table))
        self._manifest("report", inputs, out)

    def run(self, stage: str) -> None:
        handlers: dict[str, Callable[[], None]] = {
            "synth": self.stage_synth,
            "split": self.stage_split,
            "featurize": self.stage_featurize,
            "fit-baselines": self.stage_fit_baselines,
            "train": self.stage_train,
            "predict": self.stage_predict,
            "evaluate": self.stage_evaluate,
            "report": self.stage_report,
        }
        if stage == "all":
            for s in STAGES:
                if s == "synth" and self.cfg.synth is None:
                    continue
                log.info("stage %s", s)
                Pipeline(self.cfg).run(s)
            return
        if stage not in handlers:
            raise PipelineError(f"unknown stage {stage!r}; choose from {', '.join(STAGES + ('all',))}")
        handlers[stage]()


def _check_finite(what: str, arr) -> None:
    if not np.all(np.isfinite(np.asarray(arr, dtype=float))):
        raise PipelineError(f"non-finite values in {what}")


def _check_no_leakage(cohort: Cohort, split) -> None:
    seen: dict[str, str] = {}
    for e in cohort.episodes:
        part = split.partition_of[e.episode_id]
        if seen.setdefault(e.patient_id, part) != part:
            raise PipelineError(f"patient {e.patient_id} spans partitions")


def load_prediction_set(path, label: str) -> PredictionSet:
    rows = read_table(path)
    return PredictionSet(
        label, {r["episode_id"]: (float(r["mu_hr"]), float(r["mu_sbp"]), float(r["mu_dbp"])) for r in rows}
    )


def _opt(x: str):
    return float(x) if x != "" else None


def load_report(rows_path, anova_path, summary_path) -> EvaluationReport:
    rows = [
        ReportRow(r["model"], r["vital"], r["stratum_kind"], r["stratum_label"], int(r["N"]),
                  _opt(r["rmse"]), _opt(r["mae"]), _opt(r.get("rmse_literal", "") or ""))
        for r in read_table(rows_path)
    ]
    anova = [
        AnovaRow(a["vital"], a["model"], a["baseline"], float(a["F"]), int(a["df_between"]),
                 int(a["df_within"]), float(a["p"]), a["degenerate"] == "1")
        for a in read_table(anova_path)
    ]
    s = read_json(summary_path)
    cuts = tuple(s["pim2_quartile_cuts"]) if s.get("pim2_quartile_cuts") else None
    return EvaluationReport(rows, anova, int(s["n_partition"]), cuts, tuple(s["models"]), list(s["notes"]))
