import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from builders import VITALS, catalog, episode, random_cohort
from icupass.cohort import (
    Cohort,
    CohortFormatError,
    Episode,
    exclusion_counts,
    filter_eligible,
    load_catalog,
    load_cohort,
    load_split,
    save_catalog,
    save_cohort,
    save_split,
    split_by_patient,
)


def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")


def record(eid, medical=20.0, physical=30.0, obs=None):
    return {
        "episode_id": eid, "patient_id": "P1", "age_months": 30.0, "diagnosis": "ards", "pim2": 0.1,
        "survived": True, "medical_discharge_hr": medical, "physical_discharge_hr": physical,
        "observations": obs if obs is not None else [["hr", 5.0, 120.0], ["hr", 1.0, 110.0]],
    }


@pytest.fixture
def catalog_file(tmp_path):
    return save_catalog(tmp_path / "catalog.csv", catalog())


def test_empty_file_gives_empty_cohort(tmp_path, catalog_file):
    (tmp_path / "c.jsonl").write_text("")
    assert len(load_cohort(tmp_path / "c.jsonl", catalog_file)) == 0


def test_two_episodes_sorted(tmp_path, catalog_file):
    write_lines(tmp_path / "c.jsonl", [record("A"), record("B")])
    c = load_cohort(tmp_path / "c.jsonl", catalog_file)
    assert [e.episode_id for e in c.episodes] == ["A", "B"]
    for e in c.episodes:
        times = [o.time for o in e.observations]
        assert times == sorted(times) == [1.0, 5.0]


def test_physical_before_medical_names_episode(tmp_path, catalog_file):
    write_lines(tmp_path / "c.jsonl", [record("A"), record("BAD", medical=20.0, physical=10.0, obs=[])])
    with pytest.raises(CohortFormatError, match=r"c\.jsonl:2.*'BAD'.*precedes"):
        load_cohort(tmp_path / "c.jsonl", catalog_file)


@pytest.mark.parametrize(
    "lines, pattern",
    [
        (["{not json"], ":1: malformed"),
        ([json.dumps(record("A")), json.dumps(record("A"))], ":2: duplicate episode_id 'A'"),
        ([json.dumps(record("A", obs=[["lactate", 1.0, 2.0]]))], ":1: unknown variable_id"),
        ([json.dumps({**record("A"), "survived": "yes"})], ":1: malformed"),
        ([json.dumps(record("A", obs=[["hr", 31.0, 1.0]]))], "after physical discharge"),
    ],
)
def test_format_errors(tmp_path, catalog_file, lines, pattern):
    (tmp_path / "c.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(CohortFormatError, match=pattern):
        load_cohort(tmp_path / "c.jsonl", catalog_file)


def test_round_trip(tmp_path, catalog_file):
    c = random_cohort(np.random.default_rng(3))
    save_cohort(tmp_path / "c.jsonl", c)
    back = load_cohort(tmp_path / "c.jsonl", load_catalog(catalog_file))
    assert back.episodes == c.episodes


def test_equal_time_ties_keep_file_order():
    e = Episode("E", "P", 1.0, None, None, True, 12.0, 13.0, (("hr", 2.0, 1.0), ("hr", 1.0, 5.0), ("hr", 2.0, 9.0)))
    assert [o.value for o in e.observations] == [5.0, 1.0, 9.0]


def test_duplicate_and_unknown_in_cohort_constructor():
    with pytest.raises(ValueError, match="duplicate"):
        Cohort((episode("A"), episode("A")), catalog())
    with pytest.raises(ValueError, match="unknown variable"):
        Cohort((episode("A", obs=[("spo2", 1.0, 99.0)]),), catalog())


# --- eligibility ---------------------------------------------------------------------


def test_two_hr_in_window_excluded():
    e = episode("E", window=0, obs=[("hr", 20.0, 1.0), ("hr", 30.0, 1.0)]
                + [(v, t, 1.0) for v in ("sbp", "dbp") for t in (20.0, 25.0, 30.0)])
    assert len(filter_eligible(Cohort((e,), catalog()))) == 0
    assert exclusion_counts(Cohort((e,), catalog())) == {"sparse_window_hr": 1}


def test_non_survivor_excluded():
    e = episode("E", survived=False, window=10)
    assert len(filter_eligible(Cohort((e,), catalog()))) == 0


def test_boundary_twelve_hours_retained():
    e = episode("E", medical=12.0, physical=12.0)
    assert len(filter_eligible(Cohort((e,), catalog()))) == 1


def test_window_counts_closed_boundaries():
    obs = [("hr", 12.0, 1.0), ("hr", 20.0, 1.0), ("hr", 11.999, 1.0)]
    e = episode("E", medical=12.0, physical=20.0, obs=obs, window=0)
    assert e.window_count("hr") == 2


def test_filter_preconditions():
    c = Cohort((episode("E"),), catalog())
    with pytest.raises(ValueError, match="not in catalog"):
        filter_eligible(c, ("hr", "spo2"))
    with pytest.raises(ValueError, match="positive"):
        filter_eligible(c, min_window_measurements=0)


def brute_force_eligible(e: Episode, vitals, k, min_hr):
    if not e.survived or not e.medical_discharge_hr >= min_hr:
        return False
    for v in vitals:
        n = sum(1 for o in e.observations
                if o.variable_id == v and e.medical_discharge_hr <= o.time <= e.physical_discharge_hr)
        if n < k:
            return False
    return True


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(1, 4), min_hr=st.sampled_from([1.0, 11.9, 12.0, 20.0]))
def test_filter_matches_brute_force(seed, k, min_hr):
    c = random_cohort(np.random.default_rng(seed))
    kept = filter_eligible(c, VITALS, k, min_hr)
    expected = [e.episode_id for e in c.episodes if brute_force_eligible(e, VITALS, k, min_hr)]
    assert [e.episode_id for e in kept.episodes] == expected
    # filtering is idempotent
    assert filter_eligible(kept, VITALS, k, min_hr).episodes == kept.episodes
    counts = exclusion_counts(c, VITALS, min_window_measurements=k, min_duration_hr=min_hr)
    assert counts.get("retained", 0) == len(kept)
    assert sum(counts.values()) == len(c)


# --- split -------------------------------------------------------------------------------


def patients_cohort(n_patients, per_patient=1):
    eps = [episode(f"P{p}-{k}", pid=f"P{p}") for p in range(n_patients) for k in range(per_patient)]
    return Cohort(tuple(eps), catalog())


def test_one_patient_three_episodes_same_partition():
    split = split_by_patient(patients_cohort(1, 3), seed=5)
    assert len(set(split.partition_of.values())) == 1


def test_ten_patients_six_two_two():
    for seed in range(20):
        assert split_by_patient(patients_cohort(10), seed=seed).counts() == {"train": 6, "validation": 2, "test": 2}


def test_cut_points_round_half_up():
    # 7 patients: 4.2 -> 4, 5.6 -> 6
    assert split_by_patient(patients_cohort(7)).counts() == {"train": 4, "validation": 2, "test": 1}


def test_split_determinism_and_seed_dependence():
    c = patients_cohort(40, 2)
    assert split_by_patient(c, seed=4) == split_by_patient(c, seed=4)
    assert split_by_patient(c, seed=4) != split_by_patient(c, seed=5)


def test_split_ignores_episode_order():
    c = patients_cohort(30, 2)
    rev = Cohort(tuple(reversed(c.episodes)), c.catalog)
    assert split_by_patient(c, seed=2).partition_of == split_by_patient(rev, seed=2).partition_of


def test_split_errors():
    with pytest.raises(ValueError, match="empty"):
        split_by_patient(Cohort((), catalog()))
    with pytest.raises(ValueError, match="sum"):
        split_by_patient(patients_cohort(3), fractions=(0.5, 0.2, 0.2))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_no_patient_spans_partitions(seed):
    rng = np.random.default_rng(seed)
    c = random_cohort(rng, n_patients=int(rng.integers(1, 40)))
    split = split_by_patient(c, seed=seed)
    part = {}
    for e in c.episodes:
        assert part.setdefault(e.patient_id, split.partition_of[e.episode_id]) == split.partition_of[e.episode_id]
    n = len({e.patient_id for e in c.episodes})
    patients_in = {p: len({e.patient_id for e in c.episodes if split.partition_of[e.episode_id] == p})
                   for p in ("train", "validation", "test")}
    assert patients_in["train"] == math.floor(0.6 * n + 0.5)
    assert patients_in["train"] + patients_in["validation"] == math.floor(0.8 * n + 0.5)


def test_split_file_round_trip(tmp_path):
    split = split_by_patient(patients_cohort(9, 2), seed=1)
    save_split(tmp_path / "s.csv", split)
    assert load_split(tmp_path / "s.csv").partition_of == dict(split.partition_of)
