"""Item and attribute universe.

Every item carries a uniform indicator distribution over its attributes:
an item with ``m`` attributes puts weight ``1/m`` on each of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class CatalogError(ValueError):
    pass


@dataclass(frozen=True)
class ItemCatalog:
    item_ids: tuple[str, ...]
    attribute_names: tuple[str, ...]
    attr_rows: np.ndarray
    _item_index: dict[str, int] = field(repr=False, compare=False, default_factory=dict)
    _attr_index: dict[str, int] = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        rows = np.ascontiguousarray(self.attr_rows, dtype=np.float64)
        rows.setflags(write=False)
        object.__setattr__(self, "attr_rows", rows)
        object.__setattr__(self, "_item_index", {x: i for i, x in enumerate(self.item_ids)})
        object.__setattr__(self, "_attr_index", {g: i for i, g in enumerate(self.attribute_names)})
        if len(self._item_index) != len(self.item_ids):
            raise CatalogError("duplicate external item id")
        if rows.shape != (len(self.item_ids), len(self.attribute_names)):
            raise CatalogError(
                f"attr_rows shape {rows.shape} does not match "
                f"{len(self.item_ids)} items x {len(self.attribute_names)} attributes"
            )

    @property
    def item_count(self) -> int:
        return len(self.item_ids)

    @property
    def attribute_count(self) -> int:
        return len(self.attribute_names)

    def index_of(self, item_id: str) -> int:
        try:
            return self._item_index[item_id]
        except KeyError:
            raise CatalogError(f"unknown item id {item_id!r}") from None

    def has_item(self, item_id: str) -> bool:
        return item_id in self._item_index

    def attribute_index(self, name: str) -> int:
        return self._attr_index[name]

    def attribute_set(self, item: int) -> frozenset[int]:
        return frozenset(np.flatnonzero(self.attr_rows[item]).tolist())


@dataclass(frozen=True)
class InteractionSequence:
    user_id: str
    items: tuple[int, ...]
    timestamps: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(int(x) for x in self.items))
        if self.timestamps is not None:
            ts = tuple(int(t) for t in self.timestamps)
            if len(ts) != len(self.items):
                raise ValueError("timestamps and items differ in length")
            if any(b < a for a, b in zip(ts, ts[1:])):
                raise ValueError("timestamps must be nondecreasing")
            object.__setattr__(self, "timestamps", ts)

    def __len__(self) -> int:
        return len(self.items)

    def validate(self, catalog: ItemCatalog) -> None:
        bad = [x for x in self.items if not 0 <= x < catalog.item_count]
        if bad:
            raise CatalogError(f"sequence for user {self.user_id!r} has out-of-range items {bad[:5]}")


def build_catalog(records: Iterable[tuple[str, Iterable[str]]]) -> ItemCatalog:
    """Build a catalog from ``(item_id, attribute labels)`` records.

    Items are indexed in first-appearance order; attributes likewise, in the
    order they are first seen while scanning the records.
    """
    item_ids: list[str] = []
    label_sets: list[list[str]] = []
    attr_order: dict[str, int] = {}
    seen: set[str] = set()
    for item_id, labels in records:
        item_id = str(item_id)
        if item_id in seen:
            raise CatalogError(f"duplicate item id {item_id!r}")
        seen.add(item_id)
        labels = list(dict.fromkeys(str(g) for g in labels if str(g)))
        if not labels:
            raise CatalogError(f"item {item_id!r} has no attributes")
        for g in labels:
            attr_order.setdefault(g, len(attr_order))
        item_ids.append(item_id)
        label_sets.append(labels)
    if not item_ids:
        raise CatalogError("no attribute records")

    rows = np.zeros((len(item_ids), len(attr_order)))
    for i, labels in enumerate(label_sets):
        rows[i, [attr_order[g] for g in labels]] = 1.0 / len(labels)
    return ItemCatalog(tuple(item_ids), tuple(attr_order), rows)


def attribute_row(catalog: ItemCatalog, item: int) -> np.ndarray:
    if not 0 <= item < catalog.item_count:
        raise IndexError(f"item index {item} out of range [0, {catalog.item_count})")
    return catalog.attr_rows[item]


def parse_attribute_lines(lines: Iterable[str], source: str = "<attributes>") -> list[tuple[str, list[str]]]:
    """Parse ``item<TAB>a|b|c`` lines or MovieLens ``id::title::A|B`` lines."""
    records = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        if "::" in line:
            parts = line.split("::")
            if len(parts) < 3:
                raise CatalogError(f"{source}:{lineno}: expected id::title::genres")
            item_id, labels = parts[0], parts[-1]
        else:
            parts = line.split("\t")
            if len(parts) != 2:
                raise CatalogError(f"{source}:{lineno}: expected item_id<TAB>labels")
            item_id, labels = parts
        records.append((item_id.strip(), [g.strip() for g in labels.split("|") if g.strip()]))
    return records


def load_catalog(path: str | Path) -> ItemCatalog:
    path = Path(path)
    with open(path, encoding="utf-8", errors="replace") as fh:
        return build_catalog(parse_attribute_lines(fh, str(path)))


def write_catalog(catalog: ItemCatalog, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, item_id in enumerate(catalog.item_ids):
            labels = [catalog.attribute_names[g] for g in sorted(catalog.attribute_set(i))]
            fh.write(f"{item_id}\t{'|'.join(labels)}\n")


def sequence_from_ids(user_id: str, item_ids: Sequence[str], catalog: ItemCatalog) -> InteractionSequence:
    return InteractionSequence(user_id, tuple(catalog.index_of(x) for x in item_ids))
