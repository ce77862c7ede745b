"""Accuracy, calibration and diversity metrics and a per-sequence latency harness."""

from __future__ import annotations

import json
import platform
import time
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Iterable, Sequence

import numpy as np

from .catalog import InteractionSequence, ItemCatalog
from .distribution import DEFAULT_ALPHA, ckl, history_distribution, list_distribution

METRICS = ("recall", "mrr", "ckl", "ild")


def top_k(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the ``k`` best scores; ties go to the lower item index."""
    scores = np.asarray(scores)
    k = min(k, scores.shape[0])
    if k < scores.shape[0]:
        part = np.argpartition(-scores, k - 1)[:k]
        # argpartition may cut through a tie at the boundary
        cut = scores[part].min()
        part = np.flatnonzero(scores >= cut)
    else:
        part = np.arange(scores.shape[0])
    order = np.lexsort((part, -scores[part]))
    return part[order][:k].tolist()


def recall_at_k(rec_list: Sequence[int], target: int) -> int:
    return int(target in rec_list)


def mrr_at_k(rec_list: Sequence[int], target: int) -> float:
    for rank, item in enumerate(rec_list, 1):
        if item == target:
            return 1.0 / rank
    return 0.0


def ckl_at_k(rec_list: Sequence[int], seq: InteractionSequence | Sequence[int], catalog: ItemCatalog,
             alpha: float = DEFAULT_ALPHA) -> float:
    return ckl(history_distribution(seq, catalog), list_distribution(rec_list, catalog), alpha)


def ild_at_k(rec_list: Sequence[int], catalog: ItemCatalog) -> float:
    """Mean pairwise Jaccard distance between the attribute sets of listed items."""
    k = len(rec_list)
    if k < 2:
        raise ValueError("ILD needs at least two items")
    sets = [catalog.attribute_set(i) for i in rec_list]
    total = 0.0
    for a, b in combinations(sets, 2):
        total += 1.0 - len(a & b) / len(a | b)
    return 2.0 * total / (k * (k - 1))


def improvement(metric_new: float, metric_base: float) -> float:
    if metric_base == 0:
        raise ZeroDivisionError("improvement undefined for a zero baseline")
    return (metric_new - metric_base) / metric_base


@dataclass
class EvalReport:
    metrics: dict[int, dict[str, float]]
    n: int
    mean_seconds: float | None = None
    config: dict = field(default_factory=dict)

    def cell(self, metric: str, k: int) -> float:
        return self.metrics[k][metric]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "mean_seconds": self.mean_seconds,
            "metrics": {f"{m}@{k}": self.metrics[k][m] for k in sorted(self.metrics) for m in METRICS},
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        ks = sorted(self.metrics)
        header = ["metric"] + [f"@{k}" for k in ks]
        rows = [[m] + [f"{self.metrics[k][m]:.4f}" for k in ks] for m in METRICS]
        widths = [max(len(r[c]) for r in [header] + rows) for c in range(len(header))]
        fmt = lambda r: "  ".join(v.ljust(w) if c == 0 else v.rjust(w) for c, (v, w) in enumerate(zip(r, widths)))
        lines = [fmt(header)] + [fmt(r) for r in rows]
        lines.append(f"N={self.n}" + (f"  mean_seconds={self.mean_seconds:.3e}" if self.mean_seconds is not None else ""))
        return "\n".join(lines)


def evaluate_lists(
    rec_lists: Sequence[Sequence[int]],
    pairs: Sequence[tuple[InteractionSequence, int]],
    catalog: ItemCatalog,
    ks: Iterable[int] = (10, 20),
    alpha: float = DEFAULT_ALPHA,
    config: dict | None = None,
) -> EvalReport:
    """Corpus means of every metric; each list is cut to its first ``K`` items per cutoff."""
    ks = sorted(set(ks))
    if len(rec_lists) != len(pairs):
        raise ValueError(f"{len(rec_lists)} lists for {len(pairs)} test cases")
    if not pairs:
        raise ValueError("nothing to evaluate")
    sums = {k: dict.fromkeys(METRICS, 0.0) for k in ks}
    for rl, (seq, target) in zip(rec_lists, pairs):
        p = history_distribution(seq, catalog)
        for k in ks:
            cut = list(rl[:k])
            if len(cut) < k:
                raise ValueError(f"list of length {len(rl)} shorter than cutoff {k}")
            acc = sums[k]
            acc["recall"] += recall_at_k(cut, target)
            acc["mrr"] += mrr_at_k(cut, target)
            acc["ckl"] += ckl(p, list_distribution(cut, catalog), alpha)
            acc["ild"] += ild_at_k(cut, catalog)
    n = len(pairs)
    return EvalReport({k: {m: v / n for m, v in sums[k].items()} for k in ks}, n, config=dict(config or {}))


def bench_latency(
    scorer: Callable[[InteractionSequence], Sequence[int]],
    sequences: Sequence[InteractionSequence],
    repetitions: int = 3,
) -> float:
    """Mean wall-clock seconds per call, after one untimed warm-up pass."""
    if repetitions < 3:
        raise ValueError("use at least 3 repetitions")
    if not sequences:
        raise ValueError("no sequences to time")
    for seq in sequences:
        scorer(seq)
    clock = time.perf_counter
    start = clock()
    for _ in range(repetitions):
        for seq in sequences:
            scorer(seq)
    return (clock() - start) / (repetitions * len(sequences))


def machine_description() -> str:
    return f"{platform.machine()} {platform.processor() or ''} {platform.python_implementation()} {platform.python_version()}".strip()
