"""Small hand-built episodes and cohorts shared by the test modules."""

from __future__ import annotations

import numpy as np

from icupass.cohort import Cohort, Episode, Variable

VITALS = ("hr", "sbp", "dbp")


def catalog(extra=()):
    base = {
        "hr": Variable("hr", "heart rate", "bpm", 110.0),
        "sbp": Variable("sbp", "systolic blood pressure", "mmHg", 100.0),
        "dbp": Variable("dbp", "diastolic blood pressure", "mmHg", 60.0),
    }
    for v in extra:
        base[v] = Variable(v, v, "au", 0.0)
    return base


def window_obs(medical, physical, values=None, n=3):
    """``n`` observations of every vital spread over the closed window."""
    times = np.linspace(medical, physical, n)
    values = values or {"hr": 120.0, "sbp": 100.0, "dbp": 60.0}
    return [(v, float(t), float(values[v])) for v in VITALS for t in times]


def episode(
    eid="E1",
    pid=None,
    age=24.0,
    diagnosis="sepsis",
    pim2=0.05,
    survived=True,
    medical=20.0,
    physical=30.0,
    obs=None,
    window=3,
):
    observations = list(obs or [])
    if window:
        observations += window_obs(medical, physical, n=window)
    return Episode(eid, pid or f"P-{eid}", age, diagnosis, pim2, survived, medical, physical, tuple(observations))


def random_cohort(rng: np.random.Generator, n_patients=12, extra=()):
    """Irregular random cohort mixing eligible and ineligible episodes."""
    eps = []
    for p in range(n_patients):
        for k in range(1 + rng.poisson(0.7)):
            medical = float(rng.choice([rng.uniform(1, 30), 12.0, rng.uniform(11.5, 12.5)]))
            physical = medical + float(rng.choice([0.0, rng.uniform(0, 20)]))
            obs = []
            for v in VITALS + tuple(extra):
                for t in rng.uniform(0, physical, rng.integers(0, 6)):
                    obs.append((v, float(t), float(rng.normal(100, 10))))
                # land some observations exactly on the window boundaries
                for t in rng.choice([medical, physical], rng.integers(0, 3)):
                    obs.append((v, float(t), float(rng.normal(100, 10))))
            eps.append(
                Episode(
                    f"P{p}-{k}", f"P{p}", float(rng.uniform(0, 200)), str(rng.choice(["a", "b"])),
                    float(rng.uniform(0, 1)), bool(rng.random() < 0.85), medical, physical, tuple(obs),
                )
            )
    return Cohort(tuple(eps), catalog(extra))
