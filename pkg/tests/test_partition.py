import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shortcutlab.core import ImageRecord, Manifest, partition_by_patient, split_stats


def _manifest(n_patients, images_per=1):
    recs = []
    for p in range(n_patients):
        for k in range(images_per):
            recs.append(
                ImageRecord(
                    f"p{p}_i{k}", f"p{p}", f"s{p}", np.zeros((4, 4)),
                    {"chf": (p + k) % 2}, {"age": p % 2},
                )
            )
    return Manifest(recs, ["chf"], ["age"])


def test_ten_patients_801010():
    split = partition_by_patient(_manifest(10), (0.8, 0.1, 0.1), seed=0)
    assert (len(split.train), len(split.validation), len(split.test)) == (8, 1, 1)


def test_multi_image_patient_stays_together():
    m = _manifest(5, images_per=3)
    split = partition_by_patient(m, (0.6, 0.2, 0.2), seed=1)
    for rec in m.records:
        homes = [rec.patient_id in s for s in (split.train, split.validation, split.test)]
        assert sum(homes) == 1


def test_same_seed_identical():
    m = _manifest(30)
    a = partition_by_patient(m, (0.7, 0.15, 0.15), seed=42)
    b = partition_by_patient(m, (0.7, 0.15, 0.15), seed=42)
    assert a.train == b.train and a.validation == b.validation and a.test == b.test


def test_different_seed_differs():
    m = _manifest(50)
    a = partition_by_patient(m, (0.7, 0.15, 0.15), seed=1)
    b = partition_by_patient(m, (0.7, 0.15, 0.15), seed=2)
    assert a.train != b.train


def test_invalid_fractions():
    m = _manifest(5)
    with pytest.raises(ValueError):
        partition_by_patient(m, (0.5, 0.5, 0.5), seed=0)
    with pytest.raises(ValueError):
        partition_by_patient(m, (1.2, -0.1, -0.1), seed=0)


def test_sizes_within_one_patient():
    m = _manifest(23)
    split = partition_by_patient(m, (0.7, 0.15, 0.15), seed=3)
    for got, frac in zip((split.train, split.validation, split.test), (0.7, 0.15, 0.15)):
        assert abs(len(got) - frac * 23) <= 1


def test_stats_recompute_matches():
    m = _manifest(20, images_per=2)
    split = partition_by_patient(m, (0.6, 0.2, 0.2), seed=7)
    for name in ("train", "validation", "test"):
        sub = m.subset(getattr(split, name))
        assert split.stats[name] == split_stats(sub)


def test_split_json_round_trip():
    from shortcutlab.core import DatasetSplit

    m = _manifest(12)
    split = partition_by_patient(m, (0.5, 0.25, 0.25), seed=9)
    again = DatasetSplit.from_json(split.to_json())
    assert again.train == split.train
    assert again.stats == split.stats


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 40),
    images=st.integers(1, 3),
    seed=st.integers(0, 10_000),
)
def test_patient_to_split_is_a_function(n, images, seed):
    m = _manifest(n, images_per=images)
    split = partition_by_patient(m, (0.6, 0.2, 0.2), seed=seed)
    seen = {}
    for rec in m.records:
        home = split.split_of(rec.patient_id)
        assert home is not None
        assert seen.setdefault(rec.patient_id, home) == home
