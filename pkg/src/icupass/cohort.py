"""Episode data model, episode-file ingestion, eligibility filters and the
patient-level train/validation/test split."""

from __future__ import annotations

import json
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .io import atomic_write_text, read_table, table_text

log = logging.getLogger(__name__)

PARTITIONS = ("train", "validation", "test")
DEFAULT_VITALS = ("hr", "sbp", "dbp")


class CohortFormatError(ValueError):
    """Raised for malformed episode or catalog files."""


class Observation(NamedTuple):
    variable_id: str
    time: float
    value: float


@dataclass(frozen=True)
class Variable:
    id: str
    name: str
    units: str
    population_median: float


@dataclass(frozen=True)
class Episode:
    """One ICU stay. Times are hours since ICU admission."""

    episode_id: str
    patient_id: str
    age_months: float
    diagnosis: str | None
    pim2: float | None
    survived: bool
    medical_discharge_hr: float
    physical_discharge_hr: float
    observations: tuple[Observation, ...] = ()

    def __post_init__(self):
        obs = tuple(Observation(str(o[0]), float(o[1]), float(o[2])) for o in self.observations)
        # stable sort keeps file order for exact-timestamp ties
        obs = tuple(sorted(obs, key=lambda o: o.time))
        object.__setattr__(self, "observations", obs)
        problems = self.invariant_violations()
        if problems:
            raise ValueError(f"episode {self.episode_id!r}: " + "; ".join(problems))

    def invariant_violations(self) -> list[str]:
        out = []
        if not (math.isfinite(self.age_months) and self.age_months >= 0):
            out.append(f"age_months must be a non-negative number, got {self.age_months}")
        if self.pim2 is not None and not (0.0 <= self.pim2 <= 1.0):
            out.append(f"pim2 outside [0, 1]: {self.pim2}")
        if not (self.medical_discharge_hr > 0 and math.isfinite(self.medical_discharge_hr)):
            out.append(f"medical_discharge_hr must be positive, got {self.medical_discharge_hr}")
        if not (self.physical_discharge_hr >= self.medical_discharge_hr):
            out.append(
                f"physical_discharge_hr ({self.physical_discharge_hr}) precedes "
                f"medical_discharge_hr ({self.medical_discharge_hr})"
            )
        for o in self.observations:
            if not (o.time >= 0 and math.isfinite(o.time)):
                out.append(f"observation time {o.time} of {o.variable_id} is negative or non-finite")
                break
            if o.time > self.physical_discharge_hr:
                out.append(f"observation of {o.variable_id} at {o.time} after physical discharge")
                break
            if not math.isfinite(o.value):
                out.append(f"non-finite value for {o.variable_id} at {o.time}")
                break
        return out

    @cached_property
    def _series(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        times: dict[str, list[float]] = {}
        values: dict[str, list[float]] = {}
        for o in self.observations:
            times.setdefault(o.variable_id, []).append(o.time)
            values.setdefault(o.variable_id, []).append(o.value)
        return {k: (np.asarray(times[k]), np.asarray(values[k])) for k in times}

    def series(self, variable_id: str) -> tuple[np.ndarray, np.ndarray]:
        """Sorted (times, values) arrays of one variable; empty if never observed."""
        return self._series.get(variable_id, (np.empty(0), np.empty(0)))

    def variables(self) -> set[str]:
        return set(self._series)

    def window_count(self, variable_id: str) -> int:
        t, _ = self.series(variable_id)
        lo = np.searchsorted(t, self.medical_discharge_hr, side="left")
        hi = np.searchsorted(t, self.physical_discharge_hr, side="right")
        return int(hi - lo)

    def to_record(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "patient_id": self.patient_id,
            "age_months": self.age_months,
            "diagnosis": self.diagnosis,
            "pim2": self.pim2,
            "survived": self.survived,
            "medical_discharge_hr": self.medical_discharge_hr,
            "physical_discharge_hr": self.physical_discharge_hr,
            "observations": [[o.variable_id, o.time, o.value] for o in self.observations],
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "Episode":
        pim2 = rec.get("pim2")
        return cls(
            episode_id=str(rec["episode_id"]),
            patient_id=str(rec["patient_id"]),
            age_months=float(rec["age_months"]),
            diagnosis=rec.get("diagnosis") or None,
            pim2=None if pim2 is None else float(pim2),
            survived=_as_bool(rec["survived"]),
            medical_discharge_hr=float(rec["medical_discharge_hr"]),
            physical_discharge_hr=float(rec["physical_discharge_hr"]),
            observations=tuple(tuple(o) for o in rec.get("observations", ())),
        )


def _as_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    raise ValueError(f"survived must be a boolean, got {v!r}")


@dataclass(frozen=True)
class Cohort:
    episodes: tuple[Episode, ...]
    catalog: Mapping[str, Variable]

    def __post_init__(self):
        object.__setattr__(self, "episodes", tuple(self.episodes))
        seen = Counter(e.episode_id for e in self.episodes)
        dupes = sorted(k for k, n in seen.items() if n > 1)
        if dupes:
            raise ValueError(f"duplicate episode_id(s): {', '.join(dupes[:5])}")
        for e in self.episodes:
            unknown = e.variables() - set(self.catalog)
            if unknown:
                raise ValueError(f"episode {e.episode_id!r} uses unknown variable(s) {sorted(unknown)}")

    def __len__(self) -> int:
        return len(self.episodes)

    @cached_property
    def by_id(self) -> dict[str, Episode]:
        return {e.episode_id: e for e in self.episodes}

    def subset(self, episode_ids: Iterable[str]) -> "Cohort":
        keep = set(episode_ids)
        return Cohort(tuple(e for e in self.episodes if e.episode_id in keep), self.catalog)

    @property
    def variable_ids(self) -> tuple[str, ...]:
        return tuple(self.catalog)


# --- catalog and episode files ------------------------------------------------

CATALOG_HEADER = ("id", "name", "units", "population_median")


def load_catalog(path: str | os.PathLike) -> dict[str, Variable]:
    catalog: dict[str, Variable] = {}
    for lineno, row in enumerate(read_table(path), start=2):
        try:
            var = Variable(row["id"], row["name"], row["units"], float(row["population_median"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise CohortFormatError(f"{path}:{lineno}: bad catalog row ({exc})") from None
        if var.id in catalog:
            raise CohortFormatError(f"{path}:{lineno}: duplicate variable id {var.id!r}")
        catalog[var.id] = var
    return catalog


def catalog_text(catalog: Mapping[str, Variable]) -> str:
    return table_text(
        CATALOG_HEADER, ((v.id, v.name, v.units, v.population_median) for v in catalog.values())
    )


def save_catalog(path: str | os.PathLike, catalog: Mapping[str, Variable]) -> Path:
    return atomic_write_text(path, catalog_text(catalog))


def load_cohort(path: str | os.PathLike, catalog: Mapping[str, Variable] | str | os.PathLike) -> Cohort:
    """Parse a line-delimited episode file. Errors carry the 1-based line number."""
    if not isinstance(catalog, Mapping):
        catalog = load_catalog(catalog)
    episodes = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                ep = Episode.from_record(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CohortFormatError(f"{path}:{lineno}: malformed episode record ({exc})") from None
            if ep.episode_id in seen:
                raise CohortFormatError(
                    f"{path}:{lineno}: duplicate episode_id {ep.episode_id!r} (first on line {seen[ep.episode_id]})"
                )
            unknown = ep.variables() - set(catalog)
            if unknown:
                raise CohortFormatError(f"{path}:{lineno}: unknown variable_id(s) {sorted(unknown)}")
            seen[ep.episode_id] = lineno
            episodes.append(ep)
    return Cohort(tuple(episodes), dict(catalog))


def cohort_text(cohort: Cohort) -> str:
    return "".join(json.dumps(e.to_record(), separators=(",", ":")) + "\n" for e in cohort.episodes)


def save_cohort(path: str | os.PathLike, cohort: Cohort) -> Path:
    return atomic_write_text(path, cohort_text(cohort))


# --- eligibility ----------------------------------------------------------------


def exclusion_reason(
    episode: Episode,
    vitals: Sequence[str] = DEFAULT_VITALS,
    min_window_measurements: int = 3,
    min_duration_hr: float = 12.0,
) -> str | None:
    """First failed inclusion criterion, or None if the episode is eligible."""
    if not episode.survived:
        return "non_survivor"
    if episode.medical_discharge_hr < min_duration_hr:
        return "short_stay"
    for v in vitals:
        if episode.window_count(v) < min_window_measurements:
            return f"sparse_window_{v}"
    return None


def exclusion_counts(cohort: Cohort, vitals: Sequence[str] = DEFAULT_VITALS, **thresholds) -> dict[str, int]:
    counts = Counter(exclusion_reason(e, vitals, **thresholds) or "retained" for e in cohort.episodes)
    return dict(sorted(counts.items()))


def filter_eligible(
    cohort: Cohort,
    vitals: Sequence[str] = DEFAULT_VITALS,
    min_window_measurements: int = 3,
    min_duration_hr: float = 12.0,
) -> Cohort:
    """Keep survivors whose medical discharge is at least ``min_duration_hr``
    after admission and who have ``min_window_measurements`` of every vital
    inside the closed medical-to-physical discharge window."""
    missing = set(vitals) - set(cohort.catalog)
    if missing:
        raise ValueError(f"vitals not in catalog: {sorted(missing)}")
    if min_window_measurements <= 0 or min_duration_hr <= 0:
        raise ValueError("thresholds must be positive")
    kept = []
    reasons: Counter = Counter()
    for e in cohort.episodes:
        why = exclusion_reason(e, vitals, min_window_measurements, min_duration_hr)
        if why is None:
            kept.append(e)
        else:
            reasons[why] += 1
    log.info("eligibility: kept %d of %d; excluded %s", len(kept), len(cohort), dict(sorted(reasons.items())))
    return Cohort(tuple(kept), cohort.catalog)


# --- split ----------------------------------------------------------------------


@dataclass(frozen=True)
class SplitAssignment:
    partition_of: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        bad = {p for p in self.partition_of.values() if p not in PARTITIONS}
        if bad:
            raise ValueError(f"unknown partition(s): {sorted(bad)}")

    def episode_ids(self, partition: str) -> list[str]:
        return [e for e, p in self.partition_of.items() if p == partition]

    def counts(self) -> dict[str, int]:
        c = Counter(self.partition_of.values())
        return {p: c.get(p, 0) for p in PARTITIONS}


def split_by_patient(
    cohort: Cohort,
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> SplitAssignment:
    """Shuffle patients (not episodes) and cut by cumulative patient count."""
    if len(cohort) == 0:
        raise ValueError("cannot split an empty cohort")
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    patients = sorted({e.patient_id for e in cohort.episodes})
    order = np.random.default_rng(seed).permutation(len(patients))
    n = len(patients)
    cut1 = math.floor(n * fractions[0] + 0.5)
    cut2 = math.floor(n * (fractions[0] + fractions[1]) + 0.5)
    partition_of_patient = {}
    for rank, idx in enumerate(order):
        part = "train" if rank < cut1 else "validation" if rank < cut2 else "test"
        partition_of_patient[patients[idx]] = part
    return SplitAssignment({e.episode_id: partition_of_patient[e.patient_id] for e in cohort.episodes})


def split_text(split: SplitAssignment) -> str:
    return table_text(("episode_id", "partition"), sorted(split.partition_of.items()))


def save_split(path: str | os.PathLike, split: SplitAssignment) -> Path:
    return atomic_write_text(path, split_text(split))


def load_split(path: str | os.PathLike) -> SplitAssignment:
    return SplitAssignment({row["episode_id"]: row["partition"] for row in read_table(path)})
