"""Per-episode discharge-window targets: mean HR, SBP and DBP between medical
and physical discharge (both boundaries included)."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cohort import DEFAULT_VITALS, Episode
from .io import atomic_write_text, read_table, table_text

TARGETS_HEADER = ("episode_id", "mu_hr", "mu_sbp", "mu_dbp", "n_hr", "n_sbp", "n_dbp")


@dataclass(frozen=True)
class PassTargets:
    episode_id: str
    mu_hr: float
    mu_sbp: float
    mu_dbp: float
    window_counts: tuple[int, int, int] = (0, 0, 0)

    def as_array(self) -> np.ndarray:
        return np.array([self.mu_hr, self.mu_sbp, self.mu_dbp])


def window_values(episode: Episode, variable_id: str) -> np.ndarray:
    t, v = episode.series(variable_id)
    inside = (t >= episode.medical_discharge_hr) & (t <= episode.physical_discharge_hr)
    return v[inside]


def compute_pass(episode: Episode, vital_ids: Sequence[str] = DEFAULT_VITALS) -> PassTargets:
    means, counts = [], []
    for var in vital_ids:
        vals = window_values(episode, var)
        if vals.size == 0:
            raise ValueError(f"episode {episode.episode_id!r} has no {var} measurements in its discharge window")
        means.append(float(vals.mean()))
        counts.append(int(vals.size))
    return PassTargets(episode.episode_id, *means, window_counts=tuple(counts))


def targets_text(targets: Iterable[PassTargets]) -> str:
    rows = (
        (t.episode_id, t.mu_hr, t.mu_sbp, t.mu_dbp, *t.window_counts)
        for t in sorted(targets, key=lambda t: t.episode_id)
    )
    return table_text(TARGETS_HEADER, rows)


def save_targets(path: str | os.PathLike, targets: Iterable[PassTargets]) -> Path:
    return atomic_write_text(path, targets_text(targets))


def load_targets(path: str | os.PathLike) -> dict[str, PassTargets]:
    out = {}
    for row in read_table(path):
        out[row["episode_id"]] = PassTargets(
            row["episode_id"],
            float(row["mu_hr"]),
            float(row["mu_sbp"]),
            float(row["mu_dbp"]),
            (int(row["n_hr"] or 0), int(row["n_sbp"] or 0), int(row["n_dbp"] or 0)),
        )
    return out


def targets_matrix(targets: Mapping[str, PassTargets], episode_ids: Sequence[str]) -> np.ndarray:
    return np.array([targets[e].as_array() for e in episode_ids]).reshape(len(episode_ids), 3)
