from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dacsr.catalog import CatalogError, build_catalog
from dacsr.ingest import (
    DatasetExhausted,
    RawInteraction,
    behavior_filter,
    kcore_filter,
    read_interactions,
    read_pairs,
    split_and_augment,
    split_stats,
    write_pairs,
)


def rows(pairs, behavior=None):
    return [RawInteraction(u, i, t, behavior) for t, (u, i) in enumerate(pairs)]


def naive_kcore(inter, ku, ki):
    cur = list(inter)
    while True:
        changed = False
        for r in list(cur):
            nu = sum(1 for x in cur if x.user_id == r.user_id)
            ni = sum(1 for x in cur if x.item_id == r.item_id)
            if nu < ku or ni < ki:
                cur = [x for x in cur if x is not r]
                changed = True
                break
        if not changed:
            return cur


def test_user_threshold_only():
    inter = rows([("A", f"i{k}") for k in range(5)] + [("B", "i0"), ("B", "i1")])
    out = kcore_filter(inter, 3, 1)
    assert {r.user_id for r in out} == {"A"}
    assert len(out) == 5


def test_chain_reaction_reaches_fixed_point():
    # dropping item z (count 1) leaves user B with 2 < 3 interactions
    inter = rows([("A", "x"), ("A", "y"), ("A", "x"), ("A", "x"), ("B", "x"), ("B", "y"), ("B", "z")])
    out = kcore_filter(inter, 3, 2)
    assert out == naive_kcore(inter, 3, 2)
    # B goes, then y falls to one occurrence, leaving A with x three times
    assert [(r.user_id, r.item_id) for r in out] == [("A", "x")] * 3


def test_identity_at_k1():
    inter = rows([("A", "x"), ("B", "y")])
    assert kcore_filter(inter, 1, 1) == inter


def test_exhausted():
    with pytest.raises(DatasetExhausted):
        kcore_filter(rows([("A", "x")]), 2, 1)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("ABCDE"), st.sampled_from("vwxyz")), min_size=1, max_size=40),
       st.integers(1, 4), st.integers(1, 4))
def test_kcore_matches_naive_sweep_and_is_fixed_point(pairs, ku, ki):
    inter = rows(pairs)
    expected = naive_kcore(inter, ku, ki)
    if not expected:
        with pytest.raises(DatasetExhausted):
            kcore_filter(inter, ku, ki)
        return
    out = kcore_filter(inter, ku, ki)
    assert out == expected
    assert kcore_filter(out, ku, ki) == out


def test_behavior_filter():
    inter = [RawInteraction("u", "a", 0, "buy"), RawInteraction("u", "b", 1, "click"), RawInteraction("u", "c", 2, "buy")]
    assert len(behavior_filter(inter, "buy")) == 2
    assert behavior_filter(inter, None) == inter
    assert behavior_filter(inter, "") == inter


def test_behavior_filter_matches_scan():
    labels = ["buy", "click", "cart", None]
    inter = [RawInteraction("u", str(k), k, labels[(k * 7) % 4]) for k in range(200)]
    count = 0
    for r in inter:
        if r.behavior == "cart":
            count += 1
    assert len(behavior_filter(inter, "cart")) == count


@pytest.fixture
def abcd():
    return build_catalog([(x, ["g"]) for x in "abcdef"])


def as_ids(split, pairs):
    return [("".join(split.catalog.item_ids[i] for i in s.items), split.catalog.item_ids[t]) for s, t in pairs]


def test_leave_one_out_four_items(abcd):
    split = split_and_augment(rows([("u", "a"), ("u", "b"), ("u", "c"), ("u", "d")]), 10, abcd)
    assert as_ids(split, split.test) == [("abc", "d")]
    assert as_ids(split, split.validation) == [("ab", "c")]
    assert as_ids(split, split.train) == [("a", "b")]


def test_leave_one_out_three_items(abcd):
    split = split_and_augment(rows([("u", "a"), ("u", "b"), ("u", "c")]), 10, abcd)
    assert as_ids(split, split.test) == [("ab", "c")]
    assert as_ids(split, split.validation) == [("a", "b")]
    assert split.train == []


def test_short_users_dropped_and_counted(abcd, caplog):
    split = split_and_augment(rows([("u", "a"), ("u", "b"), ("v", "a"), ("v", "b"), ("v", "c")]), 10, abcd)
    assert split.dropped_users == 1
    assert [s.user_id for s, _ in split.test] == ["v"]
    assert "excluded 1 users" in caplog.text


def test_truncation_keeps_most_recent(abcd):
    split = split_and_augment(rows([("u", x) for x in "abcdef"]), 2, abcd)
    assert as_ids(split, split.test) == [("de", "f")]
    assert as_ids(split, split.train) == [("a", "b"), ("ab", "c"), ("bc", "d")]
    for seq, _ in split.train + split.validation + split.test:
        assert 1 <= len(seq) <= 2


def test_timestamp_sort_is_stable(abcd):
    inter = [RawInteraction("u", "c", 5), RawInteraction("u", "a", 1), RawInteraction("u", "b", 5),
             RawInteraction("u", "d", 9)]
    split = split_and_augment(inter, 10, abcd)
    assert as_ids(split, split.test) == [("acb", "d")]


def test_train_pair_count_identity_and_no_leakage():
    import random

    rnd = random.Random(0)
    items = [f"m{k}" for k in range(40)]
    cat = build_catalog([(x, ["g"]) for x in items])
    inter = []
    lengths = {}
    for u in range(60):
        n = rnd.randint(1, 25)
        lengths[str(u)] = n
        inter += [RawInteraction(str(u), rnd.choice(items), t) for t in range(n)]
    split = split_and_augment(inter, 8, cat)
    assert len(split.train) == sum(max(n - 3, 0) for n in lengths.values() if n >= 3)
    per_user = Counter(seq.user_id for seq, _ in split.train)
    test_target = {seq.user_id: t for seq, t in split.test}
    for uid, n in lengths.items():
        assert per_user[uid] == max(n - 3, 0)
    for (vseq, vt), (tseq, tt) in zip(split.validation, split.test):
        assert vseq.user_id == tseq.user_id and test_target[tseq.user_id] == tt


def test_last_two_items_never_train_targets():
    items = [f"m{k}" for k in range(30)]
    cat = build_catalog([(x, ["g"]) for x in items])
    inter = []
    for u in range(5):
        # distinct items per user, so targets identify positions
        inter += [RawInteraction(str(u), items[(u * 3 + t) % 30], t) for t in range(4 + 2 * u)]
    split = split_and_augment(inter, 4, cat)
    held_out = {}
    for (vseq, vt), (tseq, tt) in zip(split.validation, split.test):
        held_out[tseq.user_id] = {vt, tt}
    for seq, target in split.train:
        assert target not in held_out[seq.user_id]


def test_missing_attributes_rejected_with_list():
    cat = build_catalog([("a", ["g"])])
    with pytest.raises(CatalogError, match="2 interacted items lack attributes: b, c"):
        split_and_augment(rows([("u", "a"), ("u", "b"), ("u", "c")]), 5, cat)


def test_read_movielens_and_delimited(tmp_path):
    ml = tmp_path / "ratings.dat"
    ml.write_text("1::10::5::978300760\n1::11::3::978302109\n")
    got = read_interactions(ml)
    assert got == [RawInteraction("1", "10", 978300760), RawInteraction("1", "11", 978302109)]
    csv = tmp_path / "log.csv"
    csv.write_text("user_id,item_id,timestamp,behavior\n7,a,3,buy\n7,b,4,click\n")
    got = read_interactions(csv)
    assert got == [RawInteraction("7", "a", 3, "buy"), RawInteraction("7", "b", 4, "click")]


def test_bad_timestamp_names_line(tmp_path):
    csv = tmp_path / "log.tsv"
    csv.write_text("user_id\titem_id\ttimestamp\n1\ta\t3\n1\tb\toops\n")
    with pytest.raises(ValueError, match=r"log.tsv:3"):
        read_interactions(csv)


def test_pairs_roundtrip_and_stats(tmp_path, abcd):
    split = split_and_augment(rows([("u", x) for x in "abcde"] + [("v", x) for x in "fab"]), 10, abcd)
    write_pairs(split.train, abcd, tmp_path / "train.tsv")
    assert as_ids(split, read_pairs(tmp_path / "train.tsv", abcd)) == as_ids(split, split.train)
    stats = split_stats(split)
    assert stats["users"] == 2 and stats["train_sequences"] == 2 and stats["test_sequences"] == 2
    assert stats["mean_length"] == 4.0
