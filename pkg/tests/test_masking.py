import hashlib
from collections import Counter
from decimal import Decimal, ROUND_HALF_UP

import pytest
from hypothesis import given, settings, strategies as st

from metacap.masking import (
    AVAILABILITY_GRID, SplitMix64, TargetAbsent, derive_seed, mask_record, round_half_up, stable_hash,
    sweep_views, training_view, visible_count,
)
from metacap.schema import FIELDS, MetadataRecord

M = (1 << 64) - 1


def oracle_splitmix(seed):
    """Reference SplitMix64 stream written from the published constants."""
    x = seed & M
    while True:
        x = (x + 0x9E3779B97F4A7C15) & M
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M
        yield z ^ (z >> 31)


def test_splitmix_reference_vector():
    rng = SplitMix64(0)
    assert [rng.next_u64() for _ in range(3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


@given(st.integers(min_value=0, max_value=M))
def test_splitmix_matches_oracle(seed):
    rng, ref = SplitMix64(seed), oracle_splitmix(seed)
    assert [rng.next_u64() for _ in range(5)] == [next(ref) for _ in range(5)]


@given(st.integers(min_value=0, max_value=M), st.integers(min_value=1, max_value=1000))
def test_below_in_range(seed, bound):
    rng = SplitMix64(seed)
    assert all(0 <= rng.below(bound) < bound for _ in range(20))


def test_random_in_unit_interval():
    rng = SplitMix64(7)
    xs = [rng.random() for _ in range(2000)]
    assert all(0 <= x < 1 for x in xs)
    assert abs(sum(xs) / len(xs) - 0.5) < 0.03


def test_stable_hash():
    assert stable_hash("") == 0xE3B0C44298FC1C14
    assert derive_seed(5, "") == 5 ^ 0xE3B0C44298FC1C14


@pytest.mark.parametrize("x, expected", [(0.5, 1), (1.5, 2), (2.5, 3), (1.25, 1), (0.49, 0), (3.0, 3)])
def test_round_half_up(x, expected):
    assert round_half_up(x) == expected


def test_visible_count_table():
    want = {(0.25, 2): 1, (0.5, 1): 1, (0.75, 2): 2, (0.25, 6): 2, (0.75, 6): 5, (0.5, 3): 2}
    for (p, n), k in want.items():
        assert visible_count(p, n) == k


def test_frozen_mask_example():
    rec = MetadataRecord(genre=["rock"], mood=["calm"], instruments=["piano"], tempo="120", key="C major")
    view = mask_record(rec, 0.5, "mood", seed=42)
    assert set(view.visible) == {"instruments", "key"}
    assert view.hidden == frozenset({"genre", "mood", "tempo"})
    assert view.visible["key"] == "C major"


def oracle_mask(record, p, target, seed, key):
    """Independent shuffle-and-cut over canonical order."""
    cands = [f for f in FIELDS if f in record and f != target]
    gen = oracle_splitmix(seed ^ int(hashlib.sha256(key.encode()).hexdigest()[:16], 16))

    def below(b):
        threshold = ((1 << 64) - b) % b
        while True:
            r = next(gen)
            if r >= threshold:
                return r % b

    for i in range(len(cands) - 1, 0, -1):
        j = below(i + 1)
        cands[i], cands[j] = cands[j], cands[i]
    k = int((Decimal(str(p)) * len(cands)).quantize(Decimal(1), rounding=ROUND_HALF_UP))
    return set(cands[:k])


@st.composite
def full_records(draw):
    fields = draw(st.sets(st.sampled_from(FIELDS), min_size=1))
    return MetadataRecord({f: (["x"] if f in ("genre", "mood", "instruments", "keywords") else "x") for f in fields})


@settings(max_examples=300)
@given(full_records(), st.sampled_from(AVAILABILITY_GRID), st.integers(0, 2**32), st.text(max_size=6), st.data())
def test_mask_matches_oracle(rec, p, seed, key, data):
    target = data.draw(st.sampled_from([None, *rec]))
    view = mask_record(rec, p, target, seed, key)
    assert set(view.visible) == oracle_mask(rec, p, target, seed, key)


@settings(max_examples=300)
@given(full_records(), st.sampled_from(AVAILABILITY_GRID), st.integers(0, 2**32), st.data())
def test_mask_invariants(rec, p, seed, data):
    target = data.draw(st.sampled_from([None, *rec]))
    view = mask_record(rec, p, target, seed)
    n = len(rec) - (target is not None)
    assert len(view.visible) == visible_count(p, n)
    assert set(view.visible) | view.hidden == set(rec)
    assert not set(view.visible) & view.hidden
    if target is not None:
        assert target in view.hidden
    for f in view.visible:
        assert view.visible[f] == rec[f]
    assert mask_record(rec, p, target, seed) == view


@settings(max_examples=200)
@given(full_records(), st.integers(0, 2**32), st.data())
def test_sweep_views_nest(rec, seed, data):
    target = data.draw(st.sampled_from(list(rec)))
    views = sweep_views(rec, target, AVAILABILITY_GRID, seed, "k")
    for a, b in zip(views, views[1:]):
        assert set(a.visible) <= set(b.visible)
    for p, v in zip(AVAILABILITY_GRID, views):
        assert v == mask_record(rec, p, target, seed, "k")


def test_target_absent(full_record):
    with pytest.raises(TargetAbsent):
        mask_record(full_record.without(["mood"]), 0.5, "mood")


@pytest.mark.parametrize("p", [-0.1, 1.5, float("nan")])
def test_bad_availability(full_record, p):
    with pytest.raises(ValueError):
        mask_record(full_record, p)


def test_per_field_uniformity(full_record):
    rec = full_record.restrict(["genre", "mood", "instruments", "keywords", "tempo"])
    hits = Counter()
    for s in range(4000):
        hits.update(list(mask_record(rec, 0.5, "tempo", s).visible))
    for f in ("genre", "mood", "instruments", "keywords"):
        assert abs(hits[f] / 4000 - 0.5) < 0.03


def test_training_view_grid_uniform(full_record):
    levels = Counter(training_view(full_record, s, "x").availability for s in range(5000))
    assert set(levels) == set(AVAILABILITY_GRID)
    for p in AVAILABILITY_GRID:
        assert abs(levels[p] / 5000 - 0.2) < 0.03


def test_training_view_consistent(full_record):
    v = training_view(full_record, 9, "e1")
    assert v == mask_record(full_record, v.availability, None, 9, "e1")
