import json
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psypipe import psychometrics as pm
from psypipe.errors import IncompletenessError, KeyMismatchError, RangeError


def brute_force_domains(items):
    """Independent oracle: reads the raw key file and scores item by item."""
    doc = json.loads(resources.files("psypipe").joinpath("data/hexaco60_key.json").read_text())
    totals = {}
    for entry in doc["items"]:
        value = items[entry["index"] - 1]
        if entry["reversed"]:
            value = 6 - value
        totals.setdefault(entry["scale"], []).append(value)
    return {scale: sum(v) / len(v) for scale, v in totals.items()}


def test_key_shape(hexaco, beyond):
    assert len(hexaco.items) == 60
    assert hexaco.scales == pm.DOMAINS
    assert all(len(hexaco.items_for(d)) == 10 for d in pm.DOMAINS)
    assert len(beyond.items) == 51
    assert len(beyond.scales) == 9
    assert set(hexaco.indices).isdisjoint(set()) and len(set(hexaco.indices)) == 60


def test_domain_follows_item_position(hexaco):
    cycle = {1: "OP", 2: "C", 3: "A", 4: "EX", 5: "E", 0: "HH"}
    for it in hexaco.items:
        assert it.scale == cycle[it.index % 6]


@pytest.mark.parametrize("x,expected", [(1, 5), (3, 3), (5, 1), (2, 4)])
def test_reverse_score(x, expected):
    assert pm.reverse_score(x) == expected


@pytest.mark.parametrize("x", [0, 6, 2.5, True])
def test_reverse_score_range(x):
    with pytest.raises(RangeError):
        pm.reverse_score(x)


def test_all_threes(hexaco):
    assert pm.aggregate([3] * 60, hexaco) == {d: 3.0 for d in pm.DOMAINS}


def test_all_fives_counts_reversals(hexaco):
    result = pm.aggregate([5] * 60, hexaco)
    for d in pm.DOMAINS:
        k = hexaco.reversed_count(d)
        assert result[d] == pytest.approx((5 * (10 - k) + k) / 10, abs=1e-12)
    assert any(hexaco.reversed_count(d) > 0 for d in pm.DOMAINS)


def test_random_vectors_match_oracle(hexaco, rng):
    for _ in range(200):
        items = rng.integers(1, 6, size=60).tolist()
        assert pm.aggregate(items, hexaco) == brute_force_domains(items)


def test_missing_and_unknown_indices(hexaco):
    items = {i: 3 for i in range(1, 61)}
    del items[17]
    with pytest.raises(IncompletenessError) as exc:
        pm.aggregate(items, hexaco)
    assert exc.value.missing == (17,) or list(exc.value.missing) == [17]
    with pytest.raises(KeyMismatchError):
        pm.aggregate({**{i: 3 for i in range(1, 61)}, 61: 3}, hexaco)


def test_out_of_range_item(hexaco):
    items = [3] * 60
    items[4] = 6
    with pytest.raises(RangeError, match="item 5"):
        pm.aggregate(items, hexaco)


def test_beyond_aggregation(beyond):
    result = pm.aggregate([3] * 51, beyond)
    assert set(result) == set(pm.subscales())
    assert all(v == 3.0 for v in result.values())


def test_profile_distance():
    a = {d: 3.0 for d in pm.DOMAINS} | {"HH": 4.4}
    b = {d: 3.0 for d in pm.DOMAINS} | {"HH": 3.9}
    delta = pm.profile_distance(a, b)
    assert delta["HH"] == pytest.approx(0.5)
    assert pm.profile_distance(a, a) == {d: 0.0 for d in pm.DOMAINS}
    back = pm.profile_distance(b, a)
    assert all(back[d] == -delta[d] for d in pm.DOMAINS)
    with pytest.raises(KeyMismatchError):
        pm.profile_distance(a, {"HH": 1.0})


likert = st.lists(st.integers(1, 5), min_size=60, max_size=60)


@settings(max_examples=100, deadline=None)
@given(likert, st.randoms(use_true_random=False))
def test_permutation_invariance(items, random):
    key = pm.hexaco_key()
    order = list(range(1, 61))
    random.shuffle(order)
    shuffled = {i: items[i - 1] for i in order}
    assert pm.aggregate(shuffled, key) == pm.aggregate(items, key)


@settings(max_examples=100, deadline=None)
@given(likert)
def test_mirror_with_flipped_key(items):
    key = pm.hexaco_key()
    doc = key.to_dict()
    for entry in doc["items"]:
        entry["reversed"] = not entry["reversed"]
    flipped = pm.ScoringKey.from_dict(doc)
    mirrored = [6 - v for v in items]
    assert pm.aggregate(mirrored, flipped) == pytest.approx(pm.aggregate(items, key), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(likert)
def test_means_on_tenth_grid(items):
    for value in pm.aggregate(items, pm.hexaco_key()).values():
        assert 1 <= value <= 5
        assert abs(value * 10 - round(value * 10)) < 1e-9


def test_items_for_means_round_trip(hexaco):
    rng = np.random.default_rng(3)
    for _ in range(50):
        target = {d: round(float(rng.uniform(1, 5)), 1) for d in pm.DOMAINS}
        items = pm.items_for_means(target, hexaco, rng)
        got = pm.aggregate(items, hexaco)
        assert got == pytest.approx(target, abs=1e-9)
