import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morphiris.pairsel import (CapacityError, DatasetManifest, ManifestEntry, MorphPair, load_pairs,
                               max_radius_pairs, max_random_pairs, mean_pupil_delta, save_pairs, select_by_radius,
                               select_random)


def entry(subj, pr, side="L", ir=None, idx=0):
    return ManifestEntry(subj, side, f"{subj}_{side}_{idx}.pgm", float(pr), float(ir if ir is not None else pr + 40))


def test_single_possible_pair():
    m = DatasetManifest([entry("A", 20), entry("B", 30)])
    pairs = select_random(m, 1, 0)
    assert len(pairs) == 1 and {pairs[0].entry_a.subject_id, pairs[0].entry_b.subject_id} == {"A", "B"}


def test_random_deterministic_and_capacity():
    m = DatasetManifest([entry(s, 20 + i, side) for i, s in enumerate("ABCD") for side in "LR"])
    assert max_random_pairs(m) == 12
    assert select_random(m, 5, 3) == select_random(m, 5, 3)
    with pytest.raises(CapacityError, match="12"):
        select_random(m, 13, 0)


def test_radius_first_pair():
    m = DatasetManifest([entry("A", 20), entry("B", 21), entry("C", 30)])
    p = select_by_radius(m, 1)[0]
    assert {p.entry_a.pupil_radius, p.entry_b.pupil_radius} == {20, 21}


def test_radius_skips_same_subject():
    m = DatasetManifest([entry("A", 20, idx=0), entry("A", 20.1, idx=1), entry("B", 20.5)])
    p = select_by_radius(m, 1)[0]
    assert {p.entry_a.subject_id, p.entry_b.subject_id} == {"A", "B"}


def test_radius_ties():
    m = DatasetManifest([entry("C", 10, ir=50), entry("A", 10, ir=50), entry("B", 10, ir=50)])
    pairs = select_by_radius(m, 1)
    assert (pairs[0].entry_a.subject_id, pairs[0].entry_b.subject_id) == ("A", "B")
    m2 = DatasetManifest([entry("C", 10, ir=50.2), entry("A", 10, ir=50), entry("B", 10, ir=50.5)])
    p = select_by_radius(m2, 1)[0]
    assert {p.entry_a.subject_id, p.entry_b.subject_id} == {"A", "C"}
    with pytest.raises(CapacityError):
        select_by_radius(m, 2)


def test_pair_invariants():
    with pytest.raises(ValueError):
        MorphPair(entry("A", 20), entry("A", 21, idx=1), "random")
    with pytest.raises(ValueError):
        MorphPair(entry("A", 20), entry("B", 21, side="R"), "random")
    with pytest.raises(ValueError):
        ManifestEntry("A", "X", "a.pgm", 20, 60)
    with pytest.raises(ValueError):
        DatasetManifest([entry("A", 20), entry("A", 20)])


manifests = st.lists(st.tuples(st.integers(0, 6), st.sampled_from("LR"), st.floats(15, 40)), min_size=2,
                     max_size=30)


def build(rows):
    return DatasetManifest(ManifestEntry(f"S{s}", side, f"img{i}.pgm", round(pr, 3), 70.0)
                           for i, (s, side, pr) in enumerate(rows))


@settings(max_examples=60, deadline=None)
@given(manifests, st.integers(0, 2**32 - 1))
def test_selection_properties(rows, seed):
    m = build(rows)
    n = max_radius_pairs(m)
    pairs = select_by_radius(m, n)
    deltas = [p.pupil_delta for p in pairs]
    assert deltas == sorted(deltas)
    used = [e.image_path for p in pairs for e in (p.entry_a, p.entry_b)]
    assert len(used) == len(set(used))
    for p in pairs + select_random(m, min(3, max_random_pairs(m)), seed):
        assert p.entry_a.subject_id != p.entry_b.subject_id
        assert p.entry_a.eye_side == p.entry_b.eye_side


def test_radius_beats_random_on_average():
    rng = np.random.default_rng(5)
    for trial in range(20):
        rows = [(s, side, rng.uniform(20, 38)) for s in range(15) for side in "LR" for _ in range(3)]
        m = build(rows)
        n = 20
        assert mean_pupil_delta(select_by_radius(m, n)) <= mean_pupil_delta(select_random(m, n, trial))


def test_pair_file_roundtrip(tmp_path):
    m = DatasetManifest([entry(s, 20 + i) for i, s in enumerate("ABCDE")])
    pairs = select_random(m, 4, 1)
    save_pairs(tmp_path / "p.csv", pairs)
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "pathA,pathB,strategy"
    assert load_pairs(tmp_path / "p.csv", m) == pairs
    m.save(tmp_path / "m.csv")
    assert DatasetManifest.load(tmp_path / "m.csv") == m
