"""Run configuration: a single YAML (or JSON) file with explicit seeds."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .rnn import TrainConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FilterSettings:
    vitals: tuple[str, ...] = ("hr", "sbp", "dbp")
    min_window_measurements: int = 3
    min_duration_hr: float = 12.0


@dataclass(frozen=True)
class SplitSettings:
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0


@dataclass(frozen=True)
class BaselineSettings:
    degree_min: int = 1
    degree_max: int = 8
    ridge: float = 1e-8
    age_normal_table: str | None = None  # None = bundled fixture


@dataclass(frozen=True)
class RnnSettings:
    pmd: TrainConfig = field(default_factory=lambda: TrainConfig(regime="PMD"))
    h12: TrainConfig = field(default_factory=lambda: TrainConfig(regime="H12"))
    search: bool = False
    hidden_sizes: tuple[int, ...] = (32, 64, 128)
    learning_rates: tuple[float, ...] = (1e-3, 3e-4)


@dataclass(frozen=True)
class EvalSettings:
    partition: str = "test"
    audit_literal_rmse: bool = False
    age_bins: Mapping[str, tuple[float, ...]] | None = None  # None = age-normal table edges


@dataclass(frozen=True)
class RunConfig:
    out: str = "run"
    cohort: str | None = None
    catalog: str | None = None
    synth: SynthConfig | None = field(default_factory=SynthConfig)
    filter: FilterSettings = field(default_factory=FilterSettings)
    split: SplitSettings = field(default_factory=SplitSettings)
    grid_step_hr: float = 1.0
    dump_matrices: bool = False
    baselines: BaselineSettings = field(default_factory=BaselineSettings)
    rnn: RnnSettings = field(default_factory=RnnSettings)
    evaluation: EvalSettings = field(default_factory=EvalSettings)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def cohort_path(self) -> Path:
        return Path(self.cohort) if self.cohort else self.out_dir / "cohort.jsonl"

    @property
    def catalog_path(self) -> Path:
        return Path(self.catalog) if self.catalog else self.out_dir / "catalog.csv"

    def with_seed(self, seed: int) -> "RunConfig":
        """Override every seed in the run."""
        rnn = replace(self.rnn, pmd=replace(self.rnn.pmd, seed=seed), h12=replace(self.rnn.h12, seed=seed))
        synth = replace(self.synth, seed=seed) if self.synth is not None else None
        return replace(self, synth=synth, split=replace(self.split, seed=seed), rnn=rnn)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def digest_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def _plain(obj):
    if isinstance(obj, Mapping):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _section(cls, data: Mapping | None, name: str):
    data = dict(data or {})
    unknown = set(data) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"{name}: unknown setting(s) {sorted(unknown)}")
    for k, v in list(data.items()):
        if isinstance(v, list):
            data[k] = tuple(v)
    return cls(**data)


def config_from_dict(d: Mapping[str, Any]) -> RunConfig:
    d = dict(d or {})
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown top-level setting(s) {sorted(unknown)}")
    try:
        kwargs: dict[str, Any] = {k: d[k] for k in ("out", "cohort", "catalog", "grid_step_hr", "dump_matrices") if k in d}
        if "synth" in d:
            kwargs["synth"] = None if d["synth"] is None else SynthConfig.from_dict(d["synth"])
        kwargs["filter"] = _section(FilterSettings, d.get("filter"), "filter")
        kwargs["split"] = _section(SplitSettings, d.get("split"), "split")
        kwargs["baselines"] = _section(BaselineSettings, d.get("baselines"), "baselines")
        rnn = dict(d.get("rnn") or {})
        pmd = TrainConfig.from_dict({**(rnn.pop("pmd", None) or {}), "regime": "PMD"})
        h12 = TrainConfig.from_dict({**(rnn.pop("h12", None) or {}), "regime": "H12"})
        kwargs["rnn"] = replace(_section(RnnSettings, rnn, "rnn"), pmd=pmd, h12=h12)
        ev = dict(d.get("evaluation") or {})
        if ev.get("age_bins"):
            ev["age_bins"] = {k: tuple(float(x) for x in v) for k, v in ev["age_bins"].items()}
        kwargs["evaluation"] = _section(EvalSettings, ev, "evaluation")
        cfg = RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.grid_step_hr <= 0:
        raise ConfigError("grid_step_hr must be positive")
    if cfg.evaluation.partition not in ("train", "validation", "test"):
        raise ConfigError("evaluation.partition must be train, validation or test")
    if cfg.baselines.degree_min < 1 or cfg.baselines.degree_max < cfg.baselines.degree_min:
        raise ConfigError("baselines: need 1 <= degree_min <= degree_max")
    fr = cfg.split.fractions
    if len(fr) != 3 or any(f <= 0 for f in fr) or abs(sum(fr) - 1) > 1e-9:
        raise ConfigError("split.fractions must be three positive numbers summing to 1")


def load_config(path: str | os.PathLike) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)  # JSON is valid YAML
    return config_from_dict(data or {})
