"""Synthetic interaction corpora with attribute-clustered items.

Users hold a mixture over attribute clusters. Their histories are sticky:
they stay inside one cluster for a while, mostly stepping along a fixed
successor chain, then jump to a cluster drawn from their mixture. A purely
accuracy-driven model therefore over-recommends the current cluster.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .catalog import ItemCatalog, build_catalog
from .ingest import DatasetSplit, RawInteraction, split_and_augment


@dataclass
class SyntheticSpec:
    users: int = 300
    clusters: int = 4
    items_per_cluster: int = 12
    min_len: int = 15
    max_len: int = 30
    switch_prob: float = 0.2
    successor_prob: float = 0.7
    concentration: float = 1.0
    secondary_frac: float = 0.0
    main_mass: float | None = None
    seed: int = 0


def generate(spec: SyntheticSpec) -> tuple[list[RawInteraction], list[tuple[str, list[str]]]]:
    """Return ``(interactions, attribute records)`` for a synthetic corpus.

    ``main_mass`` pins one random cluster per user at that share of the
    mixture (the imbalanced-interest setting).
    """
    rng = np.random.default_rng(spec.seed)
    g, m = spec.clusters, spec.items_per_cluster
    labels = [f"attr{c}" for c in range(g)]
    records = []
    for c in range(g):
        for j in range(m):
            attrs = [labels[c]]
            if rng.random() < spec.secondary_frac:
                attrs.append(labels[(c + 1 + rng.integers(g - 1)) % g])
            records.append((f"i{c * m + j}", attrs))

    interactions = []
    for u in range(spec.users):
        if spec.main_mass is None:
            mix = rng.dirichlet(np.full(g, spec.concentration))
        else:
            main = rng.integers(g)
            mix = np.full(g, (1.0 - spec.main_mass) / (g - 1))
            mix[main] = spec.main_mass
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        c = rng.choice(g, p=mix)
        j = int(rng.integers(m))
        for t in range(n):
            interactions.append(RawInteraction(str(u), f"i{c * m + j}", t))
            r = rng.random()
            if r < spec.switch_prob:
                c = rng.choice(g, p=mix)
                j = int(rng.integers(m))
            elif r < spec.switch_prob + (1 - spec.switch_prob) * spec.successor_prob:
                j = (j + 1) % m
            else:
                j = int(rng.integers(m))
    return interactions, records


def synthetic_split(spec: SyntheticSpec, max_len: int = 50) -> DatasetSplit:
    interactions, records = generate(spec)
    catalog: ItemCatalog = build_catalog(records)
    return split_and_augment(interactions, max_len, catalog)
