"""Deterministic synthetic PICU cohort generator.

Each episode carries a latent severity ``s`` in (0, 1). Its discharge-window
targets are a smooth function of age plus a diagnosis offset, a severity
offset and per-episode noise. Before medical discharge every vital equals its
target plus a deviation that decays exponentially; medical discharge is the
first grid hour at which the deviation has shrunk below a fixed fraction of
its initial size. Auxiliary variables are noisy linear mixtures of severity
and the diagnosis offsets, so an age-only model cannot see most of the
between-episode signal while a sequence model can.

The time from admission to medical discharge and the medical-to-physical lag
are drawn from two-piece log-normal distributions (different log-scale below
and above the median), which is what lets the lag hit its 7 / 9 / 28 hour
quartiles exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np

from .cohort import Cohort, Episode, Observation, Variable
from .targets import PassTargets

Z_QUARTILE = 0.6744897501960817
VITALS = ("hr", "sbp", "dbp")


def _logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


def two_piece_lognormal(quartiles: Sequence[float], z) -> np.ndarray:
    """Quantile map of a log-normal with separate scales below / above the median."""
    q25, q50, q75 = quartiles
    lo = math.log(q50 / q25) / Z_QUARTILE
    hi = math.log(q75 / q50) / Z_QUARTILE
    z = np.asarray(z, dtype=float)
    return q50 * np.exp(np.where(z < 0, lo * z, hi * z))


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_patients: int = 1600
    extra_episode_rate: float = 0.26  # Poisson mean of readmissions per patient
    readmit_gap_months: float = 24.0
    n_aux: int = 16
    # (weight, lo_months, hi_months), uniform within each component
    age_mixture: tuple = (
        (0.01, 0.0, 1.0),
        (0.15, 1.0, 12.0),
        (0.16, 12.0, 36.0),
        (0.08, 36.0, 60.0),
        (0.06, 60.0, 84.0),
        (0.12, 84.0, 120.0),
        (0.42, 120.0, 252.0),
    )
    diagnoses: tuple = (
        "spine_curve_disorder", "ards", "brain_neoplasm", "sepsis", "respiratory_infection",
        "cardiac", "neurologic", "trauma", "other",
    )
    diagnosis_weights: tuple = (0.10, 0.07, 0.06, 0.06, 0.15, 0.14, 0.12, 0.10, 0.20)
    # per-diagnosis (hr, sbp, dbp) offsets
    diagnosis_offsets: tuple = (
        (-6.0, 6.0, 4.0), (12.0, -6.0, -4.0), (-8.0, 8.0, 5.0), (14.0, -8.0, -6.0), (6.0, -2.0, -2.0),
        (4.0, -6.0, -3.0), (-4.0, 4.0, 2.0), (2.0, 3.0, 2.0), (0.0, 0.0, 0.0),
    )
    severity_logit_loc: float = -0.4
    severity_logit_scale: float = 1.0
    severity_offsets: tuple = (30.0, -12.0, -8.0)  # per unit of (s - median severity)
    target_noise: tuple = (8.0, 6.0, 5.0)
    pim2_intercept: float = -4.0
    pim2_slope: float = 4.0
    pim2_noise: float = 0.6
    # hr: base + amp * exp(-age / scale); bp: base + amp * (1 - exp(-age / scale))
    hr_curve: tuple = (100.0, 55.0, 40.0)
    sbp_curve: tuple = (90.0, 22.0, 60.0)
    dbp_curve: tuple = (50.0, 14.0, 60.0)
    deviation_amplitude: tuple = (20.0, -10.0, -8.0)
    resolved_fraction: float = 0.1
    medical_quartiles: tuple = (19.0, 37.0, 82.0)
    medical_severity_corr: float = 0.6
    max_medical_hr: float = 480.0
    lag_quartiles: tuple = (7.0, 9.0, 28.0)
    lag_bounds: tuple = (0.5, 336.0)
    vital_rate: float = 1.0  # per hour before medical discharge
    severity_rate_gain: float = 1.0
    window_rate: float = 0.5
    min_window: int = 3
    measurement_noise: tuple = (4.0, 5.0, 4.0)
    fluctuation_sd: tuple = (10.0, 7.0, 6.0)  # autocorrelated pre-discharge wander
    fluctuation_hours: float = 8.0
    window_noise: tuple = (5.0, 6.0, 5.0)
    aux_rate: float = 1.0 / 6.0
    aux_noise: float = 0.5
    max_retries: int = 20
    ineligible_fraction: float = 0.0

    def __post_init__(self):
        for name in ("target_noise", "measurement_noise", "window_noise", "fluctuation_sd"):
            if any(x < 0 for x in getattr(self, name)):
                raise ValueError(f"{name} must be non-negative")
        if abs(sum(self.diagnosis_weights) - 1.0) > 1e-9 or len(self.diagnosis_weights) != len(self.diagnoses):
            raise ValueError("diagnosis weights must match diagnoses and sum to 1")
        if len(self.diagnosis_offsets) != len(self.diagnoses):
            raise ValueError("one offset triple per diagnosis")
        if abs(sum(w for w, _, _ in self.age_mixture) - 1.0) > 1e-9:
            raise ValueError("age mixture weights must sum to 1")
        if self.n_patients < 1 or self.min_window < 1 or not (0 < self.resolved_fraction < 1):
            raise ValueError("invalid generator sizes")
        if not (0 <= self.ineligible_fraction < 1):
            raise ValueError("ineligible_fraction must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown synth settings: {sorted(unknown)}")
        conv = {k: _tuplify(v) for k, v in d.items()}
        return cls(**conv)

    @property
    def variable_ids(self) -> tuple[str, ...]:
        return VITALS + ("age_years",) + tuple(f"aux{j + 1:02d}" for j in range(self.n_aux))


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


@dataclass(frozen=True)
class SyntheticCohort:
    cohort: Cohort
    truth: Mapping[str, PassTargets]


def age_curves(cfg: SynthConfig, age_months) -> np.ndarray:
    a = np.asarray(age_months, dtype=float)
    hb, ha, hs = cfg.hr_curve
    sb, sa, ss = cfg.sbp_curve
    db, da, ds = cfg.dbp_curve
    return np.stack(
        [hb + ha * np.exp(-a / hs), sb + sa * (1 - np.exp(-a / ss)), db + da * (1 - np.exp(-a / ds))], axis=-1
    )


class _Structure:
    """Cohort-wide random structure: auxiliary loadings, baselines and scales."""

    def __init__(self, cfg: SynthConfig):
        rng = np.random.default_rng([cfg.seed, 0, 0])
        self.loadings = rng.normal(size=(cfg.n_aux, 4))
        self.dynamic = rng.normal(size=cfg.n_aux)
        self.base = rng.uniform(-20, 80, size=cfg.n_aux)
        self.scale = rng.uniform(0.5, 10.0, size=cfg.n_aux)
        offsets = np.asarray(cfg.diagnosis_offsets, dtype=float)
        self.offset_scale = np.where(offsets.std(axis=0) > 0, offsets.std(axis=0), 1.0)
        self.severity_median = float(_logistic(cfg.severity_logit_loc))


def _poisson_times(rng, rate: float, start: float, stop: float) -> np.ndarray:
    if stop <= start or rate <= 0:
        return np.empty(0)
    n = rng.poisson(rate * (stop - start))
    return np.sort(rng.uniform(start, stop, size=n))


def _ou_path(rng, times: np.ndarray, sd: float, hours: float) -> np.ndarray:
    """Stationary Ornstein-Uhlenbeck values at sorted ``times``."""
    eps = rng.normal(size=times.size)
    out = np.empty(times.size)
    x = 0.0
    for k in range(times.size):
        if k == 0:
            x = sd * eps[0]
        else:
            rho = math.exp(-(times[k] - times[k - 1]) / hours)
            x = rho * x + sd * math.sqrt(1.0 - rho * rho) * eps[k]
        out[k] = x
    return out


def _sample_age(cfg: SynthConfig, rng) -> float:
    w = np.array([c[0] for c in cfg.age_mixture])
    k = rng.choice(len(w), p=w / w.sum())
    _, lo, hi = cfg.age_mixture[k]
    return float(rng.uniform(lo, hi))


def _episode(cfg: SynthConfig, st: _Structure, rng, episode_id: str, patient_id: str, age: float):
    d = int(rng.choice(len(cfg.diagnoses), p=np.asarray(cfg.diagnosis_weights)))
    z_s = rng.normal()
    s = float(_logistic(cfg.severity_logit_loc + cfg.severity_logit_scale * z_s))
    pim2 = float(_logistic(cfg.pim2_intercept + cfg.pim2_slope * s + cfg.pim2_noise * rng.normal()))
    diag_off = np.asarray(cfg.diagnosis_offsets[d], dtype=float)
    sev_off = np.asarray(cfg.severity_offsets) * (s - st.severity_median)
    target = age_curves(cfg, age) + diag_off + sev_off + np.asarray(cfg.target_noise) * rng.normal(size=3)

    rho = cfg.medical_severity_corr
    for _ in range(cfg.max_retries):
        z_m = rho * z_s + math.sqrt(1 - rho * rho) * rng.normal()
        t_star = float(two_piece_lognormal(cfg.medical_quartiles, z_m))
        if t_star <= cfg.max_medical_hr:
            break
    else:
        raise RuntimeError(f"{episode_id}: deviation never resolved within {cfg.max_medical_hr} h")
    # first grid hour with deviation below the threshold, never before hour 12
    medical = float(max(12, math.floor(t_star) + 1))
    lag = float(np.clip(two_piece_lognormal(cfg.lag_quartiles, rng.normal()), *cfg.lag_bounds))
    physical = medical + lag
    tau = t_star / math.log(1.0 / cfg.resolved_fraction)
    amp = np.asarray(cfg.deviation_amplitude) * (0.5 + s)

    survived = True
    min_window = cfg.min_window
    if cfg.ineligible_fraction and rng.uniform() < cfg.ineligible_fraction:
        kind = rng.integers(3)
        if kind == 0:
            survived = False
        elif kind == 1:
            medical = float(rng.uniform(2.0, 11.5))
            physical = medical + lag
        else:
            min_window = 0

    obs: list[Observation] = []
    rate = cfg.vital_rate * (1.0 + cfg.severity_rate_gain * s)
    for k, var in enumerate(VITALS):
        t_pre = np.concatenate([[0.0], _poisson_times(rng, rate, 0.0, medical)])
        t_pre = t_pre[t_pre < medical]
        v_pre = (
            target[k]
            + amp[k] * np.exp(-t_pre / tau)
            + _ou_path(rng, t_pre, cfg.fluctuation_sd[k], cfg.fluctuation_hours)
            + cfg.measurement_noise[k] * rng.normal(size=t_pre.size)
        )
        n_win = min_window + rng.poisson(cfg.window_rate * lag)
        if min_window == 0 and k == 0:
            n_win = min(n_win, 2)
        t_win = np.sort(rng.uniform(medical, physical, size=n_win))
        v_win = target[k] + cfg.window_noise[k] * rng.normal(size=n_win)
        obs += [Observation(var, float(t), float(v)) for t, v in zip(t_pre, v_pre)]
        obs += [Observation(var, float(t), float(v)) for t, v in zip(t_win, v_win)]

    obs.append(Observation("age_years", 0.0, age / 12.0))
    latent = np.concatenate([[z_s], diag_off / st.offset_scale])
    for j in range(cfg.n_aux):
        first = rng.uniform(0.0, 2.0)
        t = np.concatenate([[first], _poisson_times(rng, cfg.aux_rate, first, physical)])
        signal = st.loadings[j] @ latent + st.dynamic[j] * (0.5 + s) * np.exp(-t / tau)
        v = st.base[j] + st.scale[j] * (signal + cfg.aux_noise * rng.normal(size=t.size))
        obs += [Observation(f"aux{j + 1:02d}", float(a), float(b)) for a, b in zip(t, v)]

    ep = Episode(
        episode_id=episode_id,
        patient_id=patient_id,
        age_months=age,
        diagnosis=cfg.diagnoses[d],
        pim2=pim2,
        survived=survived,
        medical_discharge_hr=medical,
        physical_discharge_hr=physical,
        observations=tuple(obs),
    )
    return ep, PassTargets(episode_id, *map(float, target), window_counts=(0, 0, 0))


def generate(cfg: SynthConfig) -> SyntheticCohort:
    """Cohort plus the noise-free latent targets of every episode."""
    st = _Structure(cfg)
    episodes, truth = [], {}
    for p in range(cfg.n_patients):
        # one derived stream per patient: output never depends on generation order
        rng = np.random.default_rng([cfg.seed, 1, p])
        patient_id = f"P{p:05d}"
        age = _sample_age(cfg, rng)
        for k in range(1 + rng.poisson(cfg.extra_episode_rate)):
            if k:
                age += float(rng.uniform(0.0, cfg.readmit_gap_months))
            ep, tgt = _episode(cfg, st, rng, f"{patient_id}-{k}", patient_id, age)
            episodes.append(ep)
            truth[ep.episode_id] = tgt
    catalog = _catalog(cfg, episodes)
    return SyntheticCohort(Cohort(tuple(episodes), catalog), truth)


def _catalog(cfg: SynthConfig, episodes: Sequence[Episode]) -> dict[str, Variable]:
    names = {"hr": ("heart rate", "bpm"), "sbp": ("systolic blood pressure", "mmHg"),
             "dbp": ("diastolic blood pressure", "mmHg"), "age_years": ("age", "years")}
    values: dict[str, list[float]] = {v: [] for v in cfg.variable_ids}
    for e in episodes:
        for o in e.observations:
            values[o.variable_id].append(o.value)
    out = {}
    for var in cfg.variable_ids:
        name, units = names.get(var, (f"auxiliary signal {var[3:]}", "au"))
        med = float(np.median(values[var])) if values[var] else 0.0
        out[var] = Variable(var, name, units, med)
    return out


def oracle_targets(synthetic: SyntheticCohort, episode_id: str) -> PassTargets:
    try:
        return synthetic.truth[episode_id]
    except KeyError:
        raise KeyError(f"episode {episode_id!r} was not generated by this cohort") from None


def discharge_quartiles(cohort: Cohort) -> dict[str, tuple[float, float, float]]:
    lag = [e.physical_discharge_hr - e.medical_discharge_hr for e in cohort.episodes]
    los = [e.physical_discharge_hr for e in cohort.episodes]
    q = lambda x: tuple(float(v) for v in np.quantile(x, [0.25, 0.5, 0.75]))
    return {"lag": q(lag), "los": q(los)}
