"""Fixed-grid, forward-filled, z-scored episode matrices (variables x time)."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cohort import Cohort, Episode, SplitAssignment
from .io import atomic_write_text

Z_CLAMP = 10.0


@dataclass(frozen=True)
class NormStats:
    """Per-variable training-set statistics, in catalog order."""

    variable_ids: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    median: np.ndarray

    @property
    def zero_variance(self) -> np.ndarray:
        return self.std == 0

    @property
    def index(self) -> dict[str, int]:
        return {v: i for i, v in enumerate(self.variable_ids)}

    def to_dict(self) -> dict:
        return {
            "variable_ids": list(self.variable_ids),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "median": self.median.tolist(),
            "zero_variance": self.zero_variance.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormStats":
        return cls(
            tuple(d["variable_ids"]),
            np.asarray(d["mean"], dtype=float),
            np.asarray(d["std"], dtype=float),
            np.asarray(d["median"], dtype=float),
        )


@dataclass(frozen=True)
class FeatureMatrix:
    episode_id: str
    grid_step_hr: float
    values: np.ndarray  # D x T, normalized
    observed_mask: np.ndarray  # D x T, bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def fit_norm_stats(cohort: Cohort, split: SplitAssignment) -> NormStats:
    """Mean / population std / median of raw observed values over TRAIN episodes."""
    train_ids = set(split.episode_ids("train"))
    train = [e for e in cohort.episodes if e.episode_id in train_ids]
    if not train:
        raise ValueError("train partition is empty")
    ids = cohort.variable_ids
    mean = np.empty(len(ids))
    std = np.empty(len(ids))
    median = np.empty(len(ids))
    for i, var in enumerate(ids):
        chunks = [e.series(var)[1] for e in train]
        vals = np.concatenate(chunks) if chunks else np.empty(0)
        if vals.size == 0:
            fallback = cohort.catalog[var].population_median
            mean[i], std[i], median[i] = fallback, 0.0, fallback
            continue
        mean[i] = vals.mean()
        sd = vals.std()
        # constant columns can leave float dust in the std
        std[i] = 0.0 if np.all(vals == vals[0]) else sd
        median[i] = np.median(vals)
    return NormStats(tuple(ids), mean, std, median)


def grid_length(end_hr: float, grid_step_hr: float) -> int:
    return int(math.floor(end_hr / grid_step_hr + 1e-9)) + 1


def raw_matrix(
    episode: Episode, end_hr: float, stats: NormStats, grid_step_hr: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Forward-filled raw values and observed mask before normalization."""
    if grid_step_hr <= 0:
        raise ValueError("grid_step_hr must be positive")
    if end_hr > episode.medical_discharge_hr + 1e-9:
        raise ValueError(
            f"episode {episode.episode_id!r}: end_hr {end_hr} exceeds medical discharge "
            f"at {episode.medical_discharge_hr}"
        )
    unknown = episode.variables() - set(stats.variable_ids)
    if unknown:
        raise ValueError(f"episode {episode.episode_id!r}: unknown variable(s) {sorted(unknown)}")
    n_steps = grid_length(end_hr, grid_step_hr)
    grid = np.arange(n_steps) * grid_step_hr
    D = len(stats.variable_ids)
    raw = np.empty((D, n_steps))
    mask = np.zeros((D, n_steps), dtype=bool)
    for i, var in enumerate(stats.variable_ids):
        times, vals = episode.series(var)
        if times.size == 0:
            raw[i] = stats.median[i]
            continue
        # index of the last observation at or before each grid time; ties in
        # time resolve to the later record because the series is stably sorted
        last = np.searchsorted(times, grid, side="right") - 1
        row = np.where(last >= 0, vals[np.maximum(last, 0)], stats.median[i])
        raw[i] = row
        mask[i] = np.diff(last, prepend=-1) > 0
    return raw, mask


def normalize(raw: np.ndarray, stats: NormStats) -> np.ndarray:
    std = np.where(stats.zero_variance, 1.0, stats.std)[:, None]
    z = (raw - stats.mean[:, None]) / std
    z[stats.zero_variance] = 0.0
    return np.clip(z, -Z_CLAMP, Z_CLAMP)


def build_matrix(
    episode: Episode, end_hr: float, stats: NormStats, grid_step_hr: float = 1.0
) -> FeatureMatrix:
    """Grid points k * step for k = 0..floor(end_hr / step); forward fill,
    training-median fill before a variable's first observation, z-score,
    clamp to [-10, 10]."""
    raw, mask = raw_matrix(episode, end_hr, stats, grid_step_hr)
    return FeatureMatrix(episode.episode_id, grid_step_hr, normalize(raw, stats), mask)


def matrix_text(m: FeatureMatrix) -> str:
    D, T = m.values.shape
    lines = [f"{m.episode_id} {m.grid_step_hr!r} {D} {T}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in m.values]
    lines += [" ".join("1" if x else "0" for x in row) for row in m.observed_mask]
    return "\n".join(lines) + "\n"


def dump_matrix(path: str | os.PathLike, m: FeatureMatrix) -> Path:
    return atomic_write_text(path, matrix_text(m))


def load_matrix(path: str | os.PathLike) -> FeatureMatrix:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    episode_id, step, D, T = lines[0].split()
    D, T = int(D), int(T)
    values = np.array([[float(x) for x in ln.split()] for ln in lines[1 : 1 + D]]).reshape(D, T)
    mask = np.array([[x == "1" for x in ln.split()] for ln in lines[1 + D : 1 + 2 * D]]).reshape(D, T)
    return FeatureMatrix(episode_id, float(step), values, mask)


def build_matrices(
    episodes: Sequence[Episode], end_hrs: Sequence[float], stats: NormStats, grid_step_hr: float = 1.0
) -> list[FeatureMatrix]:
    return [build_matrix(e, t, stats, grid_step_hr) for e, t in zip(episodes, end_hrs)]
