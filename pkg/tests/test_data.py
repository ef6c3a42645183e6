from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gsto.data import (
    CLICK,
    DAY,
    PAD,
    PURCHASE,
    TEST,
    TRAIN,
    VAL,
    Event,
    GeneratorConfig,
    PlantedWorld,
    build_24h,
    build_original,
    build_purchase,
    build_splits,
    emit_pair_labels,
    fragment_by_gap,
    generate_synthetic,
    group_by_user,
    read_corpus,
    read_pairs,
    read_world,
    split_leave_one_out,
    write_corpus,
    write_pairs,
    write_world,
)
from gsto.errors import ConfigError, ContractViolation

# Intention ids in the worked example start at 0, which is reserved for padding
# here, so every id is shifted up by one.
WORKED = [0, 4293, 234, 2173, 232, 183, 913, 4298, 582, 98, 4299]
SHIFTED = [m + 1 for m in WORKED]


def _events(user, ids, times=None, actions=None):
    times = times or [i * 60 for i in range(len(ids))]
    actions = actions or [CLICK] * len(ids)
    return [Event(user, t, m, a) for m, t, a in zip(ids, times, actions)]


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic(GeneratorConfig(seed=0))


# ---------------------------------------------------------------- events


def test_padding_id_rejected():
    with pytest.raises(ContractViolation):
        Event(0, 0, PAD)
    with pytest.raises(ContractViolation):
        Event(0, 0, 3, "X")


def test_event_json_round_trip():
    e = Event(7, 123, 42, PURCHASE)
    assert Event.from_json(e.to_json()) == e
    assert e.to_json() == '{"u":7,"m":42,"t":123,"a":"P"}'


# ---------------------------------------------------------------- leave-one-out


def test_worked_example_labels():
    train, val, test = split_leave_one_out(0, SHIFTED)
    assert val.label == 98 + 1
    assert test.label == 4299 + 1
    # the test input includes the validation action
    assert test.inputs == SHIFTED[:-1]
    assert val.inputs == SHIFTED[:-2]


def test_three_events_minimal():
    train, val, test = split_leave_one_out(5, [11, 12, 13])
    assert train.inputs == [11]
    assert train.targets == [PAD]
    assert (val.label, test.label) == (12, 13)
    assert test.inputs == [11, 12]


def test_too_short_is_skipped_and_counted():
    assert split_leave_one_out(0, [1, 2]) is None
    splits = build_original(_events(0, [1, 2]) + _events(1, [3, 4, 5]))
    assert len(splits.test) == 1
    assert splits.dropped["short_users"] == 1


def test_truncation_keeps_most_recent():
    ids = list(range(1, 61))
    train, val, test = split_leave_one_out(0, ids, max_len=50)
    assert test.inputs == ids[-51:-1]
    assert len(train.inputs) == len(train.targets) == 50


def test_train_targets_are_next_steps():
    ids = [4, 8, 15, 16, 23, 42]
    train, _, _ = split_leave_one_out(0, ids)
    assert train.inputs == [4, 8, 15, 16]
    assert train.targets == [8, 15, 16, PAD]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=3, max_size=80), st.integers(1, 60))
def test_held_out_labels_never_train_targets(ids, max_len):
    train, val, test = split_leave_one_out(0, ids, max_len=max_len)
    n = len(ids)
    # targets come from positions 1..n-3 only; n-2 (val) and n-1 (test) never appear
    k = len(train.targets)
    assert train.targets == (ids[1 : n - 2] + [PAD])[-k:]
    assert len(test.inputs) <= max_len and len(train.inputs) <= max_len


def test_label_not_available_on_train():
    train, _, _ = split_leave_one_out(0, [1, 2, 3])
    with pytest.raises(ContractViolation):
        _ = train.label


# ---------------------------------------------------------------- 24 hours


def test_worked_example_gap_split():
    times, t = [], 0
    for i in range(len(SHIFTED)):
        if i == 6:  # between 183 and 913
            t += DAY + 3600
        times.append(t)
        t += 120
    frags = fragment_by_gap(_events(0, SHIFTED, times))
    got = [[e.intention - 1 for e in f] for f in frags]
    assert got == [[0, 4293, 234, 2173, 232, 183], [913, 4298, 582, 98, 4299]]
    splits = build_24h(_events(0, SHIFTED, times))
    assert [s.label - 1 for s in splits.test] == [183, 4299]
    assert [s.label - 1 for s in splits.val] == [232, 98]
    assert [s.key for s in splits.test] == [0, 1]


def test_no_gaps_matches_original():
    evs = _events(0, SHIFTED) + _events(1, [3, 1, 4, 1, 5])
    a, b = build_24h(evs), build_original(evs)
    for name in (TRAIN, VAL, TEST):
        assert [(s.inputs, s.targets) for s in a.get(name)] == [(s.inputs, s.targets) for s in b.get(name)]


def test_all_long_gaps_yield_nothing():
    times = [i * 25 * 3600 for i in range(8)]
    splits = build_24h(_events(0, list(range(1, 9)), times))
    assert not splits.train and not splits.test
    assert splits.dropped["short_fragments"] == 8


def test_24h_conserves_events(corpus):
    events, _ = corpus
    splits = build_24h(events)
    assert splits.dropped["kept_events"] + splits.dropped["short_events"] == len(events)


def test_decreasing_timestamps_rejected():
    with pytest.raises(ContractViolation):
        fragment_by_gap([Event(0, 10, 1), Event(0, 5, 2)])


# ---------------------------------------------------------------- purchase


def test_worked_example_purchase():
    ids = [377, 19, 76, 6, 87, 112, 500, 501]
    actions = [CLICK] * 5 + [PURCHASE] + [CLICK, CLICK]
    splits = build_purchase(_events(0, ids, actions=actions), fractions=(0.0, 0.0, 1.0))
    (seq,) = splits.test
    assert seq.inputs == [377, 19, 76, 6, 87]
    assert seq.label == 112
    # trailing post-purchase clicks never appear anywhere
    assert 500 not in seq.inputs


def test_purchase_first_event_skipped():
    splits = build_purchase(_events(0, [5, 6], actions=[PURCHASE, CLICK]))
    assert not (splits.train or splits.val or splits.test)
    assert splits.dropped["purchase_without_history"] == 1


def test_two_purchases_same_user_same_split():
    evs = []
    for u in range(20):
        evs += _events(u, [1, 2, 3, 4], actions=[CLICK, PURCHASE, CLICK, PURCHASE])
    splits = build_purchase(evs, seed=3)
    for name in (TRAIN, VAL, TEST):
        per_user = Counter(s.user for s in splits.get(name))
        assert all(c == 2 for c in per_user.values())


def test_purchase_user_sets_disjoint(corpus):
    events, _ = corpus
    splits = build_purchase(events)
    users = [{s.user for s in splits.get(n)} for n in (TRAIN, VAL, TEST)]
    assert not (users[0] & users[1] or users[0] & users[2] or users[1] & users[2])
    assert all(users)


def test_build_splits_rejects_unknown_scenario():
    with pytest.raises(ConfigError):
        build_splits([], "weekly")


# ---------------------------------------------------------------- generator


def test_generator_deterministic(tmp_path):
    cfg = GeneratorConfig(num_users=50, num_intentions=40, num_clusters=4, seed=11)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_corpus(a, generate_synthetic(cfg)[0])
    write_corpus(b, generate_synthetic(cfg)[0])
    assert a.read_bytes() == b.read_bytes()


def test_degenerate_generator_stays_in_cluster():
    cfg = GeneratorConfig(num_users=100, num_intentions=60, num_clusters=6, p_stay=1.0, p_noise=0.0, seed=1)
    events, world = generate_synthetic(cfg)
    for u, evs in group_by_user(events).items():
        assert {world.cluster_of[e.intention] for e in evs} == {world.user_cluster[u]}


def test_dominant_cluster_fraction(corpus):
    events, world = corpus
    inside = sum(world.cluster_of[e.intention] == world.user_cluster[e.user] for e in events)
    assert abs(inside / len(events) - GeneratorConfig().p_stay) <= 0.02


def test_generator_config_errors():
    with pytest.raises(ConfigError):
        generate_synthetic(GeneratorConfig(num_intentions=5, num_clusters=10))
    with pytest.raises(ConfigError):
        GeneratorConfig(p_stay=0.8, p_noise=0.3).validate()


def test_world_relations_well_formed(corpus):
    _, world = corpus
    assert world.relations
    assert all(a < b for a, b in world.relations)
    nb = world.neighbors()
    assert all(a in nb[b] for a, b in world.relations)


def test_timestamps_non_decreasing(corpus):
    events, _ = corpus
    for evs in group_by_user(events).values():
        assert all(x.timestamp <= y.timestamp for x, y in zip(evs, evs[1:]))


# ---------------------------------------------------------------- pair labels


def test_pair_labels_contract(corpus):
    events, world = corpus
    pairs = emit_pair_labels(world, events, neg_ratio=2, seed=0)
    pos = [(i, j) for i, j, y in pairs if y == 1]
    neg = [(i, j) for i, j, y in pairs if y == -1]
    assert len(neg) == 2 * len(pos)
    assert all((min(i, j), max(i, j)) in world.relations for i, j in pos)
    assert not any((min(i, j), max(i, j)) in world.relations for i, j in neg)
    assert all(i != j for i, j in neg)


def test_pair_labels_counting():
    world = PlantedWorld([-1, 0, 0, 1, 1, 2, 2], {(1, 3), (2, 4), (5, 6)}, {0: 0}, 0)
    events = _events(0, [1, 3, 2, 4, 5])  # (5, 6) never co-occurs
    pairs = emit_pair_labels(world, events, neg_ratio=2, seed=4)
    positives = sorted((i, j) for i, j, y in pairs if y == 1)
    assert positives == [(1, 3), (2, 4), (3, 1), (4, 2)]
    assert sum(y == -1 for *_, y in pairs) == 8


# ---------------------------------------------------------------- files


def test_corpus_round_trip(tmp_path, corpus):
    events, world = corpus
    path = tmp_path / "c.jsonl"
    write_corpus(path, events[:500], header={"config_hash": "abc"})
    back, header = read_corpus(path)
    assert back == events[:500]
    assert header == {"config_hash": "abc"}


def test_pairs_and_world_round_trip(tmp_path, corpus):
    events, world = corpus
    pairs = emit_pair_labels(world, events, seed=1)
    write_pairs(tmp_path / "p.tsv", pairs, header={"x": 1})
    assert read_pairs(tmp_path / "p.tsv") == pairs
    write_world(tmp_path / "w.json", world, header={"x": 1})
    back = read_world(tmp_path / "w.json")
    assert back.relations == world.relations and back.cluster_of == world.cluster_of


def test_split_manifest_lists_users():
    splits = build_original(_events(3, [1, 2, 3]) + _events(1, [1, 2]))
    m = splits.manifest()
    assert m["users"][TEST] == [3]
    assert m["dropped"]["short_users"] == 1
