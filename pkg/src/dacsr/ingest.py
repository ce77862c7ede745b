"""Interaction-log parsing, filtering and leave-one-out splitting."""

from __future__ import annotations

import csv
import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .catalog import CatalogError, InteractionSequence, ItemCatalog

log = logging.getLogger(__name__)

Pair = tuple[InteractionSequence, int]


class IngestError(ValueError):
    pass


class DatasetExhausted(IngestError):
    pass


@dataclass(frozen=True)
class RawInteraction:
    user_id: str
    item_id: str
    timestamp: int
    behavior: str | None = None

    def __post_init__(self):
        if self.timestamp < 0:
            raise IngestError(f"negative timestamp for user {self.user_id!r}")


@dataclass
class DatasetSplit:
    train: list[Pair]
    validation: list[Pair]
    test: list[Pair]
    catalog: ItemCatalog
    max_len: int
    dropped_users: int = 0

    @property
    def user_count(self) -> int:
        return len(self.test)


def natural_key(uid: str):
    return (0, int(uid), "") if uid.isdigit() else (1, 0, uid)


def read_movielens_ratings(path: str | Path) -> list[RawInteraction]:
    out = []
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != 4:
                raise IngestError(f"{path}:{lineno}: expected user::item::rating::timestamp")
            try:
                ts = int(parts[3])
            except ValueError:
                raise IngestError(f"{path}:{lineno}: bad timestamp {parts[3]!r}") from None
            out.append(RawInteraction(parts[0], parts[1], ts))
    return out


def read_delimited(path: str | Path, delimiter: str | None = None) -> list[RawInteraction]:
    """Read a header-bearing text file with user_id, item_id, timestamp[, behavior] columns."""
    with open(path, encoding="utf-8", errors="replace", newline="") as fh:
        head = fh.readline()
        if delimiter is None:
            delimiter = "\t" if "\t" in head else ","
        fh.seek(0)
        reader = csv.DictReader(fh, delimiter=delimiter)
        missing = {"user_id", "item_id", "timestamp"} - set(reader.fieldnames or [])
        if missing:
            raise IngestError(f"{path}:1: header lacks columns {sorted(missing)}")
        out = []
        for lineno, row in enumerate(reader, 2):
            try:
                ts = int(float(row["timestamp"]))
            except (TypeError, ValueError):
                raise IngestError(f"{path}:{lineno}: bad timestamp {row['timestamp']!r}") from None
            behavior = row.get("behavior") or None
            out.append(RawInteraction(row["user_id"].strip(), row["item_id"].strip(), ts, behavior))
    return out


def read_interactions(path: str | Path) -> list[RawInteraction]:
    path = Path(path)
    with open(path, encoding="utf-8", errors="replace") as fh:
        first = fh.readline()
    if re.match(r"^[^:]+::[^:]+::[^:]*::\d+", first):
        return read_movielens_ratings(path)
    return read_delimited(path)


def behavior_filter(interactions: Sequence[RawInteraction], keep_label: str | None) -> list[RawInteraction]:
    if not keep_label:
        return list(interactions)
    return [r for r in interactions if r.behavior == keep_label]


def kcore_filter(interactions: Sequence[RawInteraction], k_user: int, k_item: int) -> list[RawInteraction]:
    """Drop users/items below their count thresholds until nothing changes."""
    if k_user < 1 or k_item < 1:
        raise ValueError("core thresholds must be >= 1")
    kept = list(interactions)
    while True:
        users = Counter(r.user_id for r in kept)
        items = Counter(r.item_id for r in kept)
        nxt = [r for r in kept if users[r.user_id] >= k_user and items[r.item_id] >= k_item]
        if len(nxt) == len(kept):
            break
        kept = nxt
    if not kept:
        raise DatasetExhausted(f"no interactions survive {k_user}/{k_item}-core filtering")
    return kept


def check_coverage(interactions: Iterable[RawInteraction], catalog: ItemCatalog) -> None:
    missing = sorted({r.item_id for r in interactions if not catalog.has_item(r.item_id)}, key=natural_key)
    if missing:
        shown = ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else "")
        raise CatalogError(f"{len(missing)} interacted items lack attributes: {shown}")


def user_sequences(interactions: Sequence[RawInteraction], catalog: ItemCatalog) -> list[InteractionSequence]:
    """Group by user (sorted by id) and order each history by timestamp, ties in file order."""
    check_coverage(interactions, catalog)
    by_user: dict[str, list[RawInteraction]] = defaultdict(list)
    for r in interactions:
        by_user[r.user_id].append(r)
    seqs = []
    for uid in sorted(by_user, key=natural_key):
        rows = sorted(by_user[uid], key=lambda r: r.timestamp)
        seqs.append(
            InteractionSequence(uid, tuple(catalog.index_of(r.item_id) for r in rows), tuple(r.timestamp for r in rows))
        )
    return seqs


def _prefix(seq: InteractionSequence, end: int, max_len: int) -> InteractionSequence:
    start = max(0, end - max_len)
    ts = seq.timestamps[start:end] if seq.timestamps is not None else None
    return InteractionSequence(seq.user_id, seq.items[start:end], ts)


def split_sequences(seqs: Sequence[InteractionSequence], catalog: ItemCatalog, max_len: int) -> DatasetSplit:
    if max_len < 1:
        raise ValueError("max_len must be positive")
    train: list[Pair] = []
    valid: list[Pair] = []
    test: list[Pair] = []
    dropped = 0
    for seq in seqs:
        n = len(seq)
        if n < 3:
            dropped += 1
            continue
        items = seq.items
        test.append((_prefix(seq, n - 1, max_len), items[n - 1]))
        valid.append((_prefix(seq, n - 2, max_len), items[n - 2]))
        for j in range(1, n - 2):
            train.append((_prefix(seq, j, max_len), items[j]))
    if dropped:
        log.warning("excluded %d users with fewer than 3 interactions", dropped)
    return DatasetSplit(train, valid, test, catalog, max_len, dropped)


def split_and_augment(interactions: Sequence[RawInteraction], max_len: int, catalog: ItemCatalog) -> DatasetSplit:
    return split_sequences(user_sequences(interactions, catalog), catalog, max_len)


def split_stats(split: DatasetSplit) -> dict:
    users = split.test
    lengths = [len(seq) + 1 for seq, _ in users]
    interacted = set()
    for seq, target in users:
        interacted.update(seq.items)
        interacted.add(target)
    return {
        "users": len(users),
        "items": split.catalog.item_count,
        "interacted_items": len(interacted),
        "train_sequences": len(split.train),
        "validation_sequences": len(split.validation),
        "test_sequences": len(split.test),
        "attributes": split.catalog.attribute_count,
        "mean_length": round(sum(lengths) / len(lengths), 4) if lengths else 0.0,
        "max_len": split.max_len,
        "dropped_users": split.dropped_users,
    }


def write_pairs(pairs: Sequence[Pair], catalog: ItemCatalog, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for seq, target in pairs:
            prefix = ",".join(catalog.item_ids[x] for x in seq.items)
            fh.write(f"{seq.user_id}\t{prefix}\t{catalog.item_ids[target]}\n")


def read_pairs(path: str | Path, catalog: ItemCatalog) -> list[Pair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise IngestError(f"{path}:{lineno}: expected user<TAB>prefix<TAB>target")
            uid, prefix, target = parts
            items = tuple(catalog.index_of(x) for x in prefix.split(","))
            out.append((InteractionSequence(uid, items), catalog.index_of(target)))
    return out
