"""Post-processing calibration baselines over a top-Z candidate list."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .catalog import InteractionSequence, ItemCatalog
from .distribution import DEFAULT_ALPHA, history_distribution
from .evaluation import top_k


@dataclass(frozen=True)
class CandidateList:
    items: tuple[int, ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.items) != len(self.scores):
            raise ValueError("items and scores differ in length")
        if len(set(self.items)) != len(self.items):
            raise ValueError("candidate items must be distinct")
        if any(b > a for a, b in zip(self.scores, self.scores[1:])):
            raise ValueError("candidate scores must be nonincreasing")

    @property
    def z(self) -> int:
        return len(self.items)

    @classmethod
    def from_scores(cls, scores: np.ndarray, z: int = 100) -> "CandidateList":
        items = top_k(scores, z)
        return cls(tuple(items), tuple(float(scores[i]) for i in items))


_TIE_TOL = 1e-10


def _beats(obj: float, score: float, item: int, best: tuple[float, float, int] | None) -> bool:
    """Objective first (equal within ``_TIE_TOL``), then higher score, then lower index."""
    if best is None:
        return True
    b_obj, b_score, b_item = best
    tol = _TIE_TOL * max(1.0, abs(obj), abs(b_obj))
    if abs(obj - b_obj) > tol:
        return obj > b_obj
    return (score, -item) > (b_score, -b_item)


def _kl_smoothed(p_nz: np.ndarray, q_nz: np.ndarray, alpha: float) -> float:
    q_s = q_nz + alpha * (p_nz - q_nz)
    return float(np.sum(p_nz * np.log(p_nz / q_s)))


def greedy_rerank(
    cands: CandidateList,
    p_hist: np.ndarray,
    lam: float,
    k: int,
    catalog: ItemCatalog,
    alpha: float = DEFAULT_ALPHA,
) -> list[int]:
    """Greedily grow a list maximising ``(1-lam) * score_sum - lam * C_KL``.

    Each step scores every unused candidate as if appended to the current
    list; ties prefer the higher raw score, then the lower item index.
    """
    if k > cands.z:
        raise ValueError(f"K={k} exceeds candidate count Z={cands.z}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    p_hist = np.asarray(p_hist, dtype=np.float64)
    support = p_hist > 0
    p_nz = p_hist[support]
    rows = catalog.attr_rows[:, support]

    chosen: list[int] = []
    remaining = list(zip(cands.items, cands.scores))
    acc = np.zeros(p_nz.shape[0])
    score_sum = 0.0
    for step in range(1, k + 1):
        best = None
        best_key = None
        for pos, (item, score) in enumerate(remaining):
            q = (acc + rows[item]) / step
            obj = (1.0 - lam) * (score_sum + score) - lam * _kl_smoothed(p_nz, q, alpha)
            if _beats(obj, score, item, best_key):
                best, best_key = pos, (obj, score, item)
        item, score = remaining.pop(best)
        chosen.append(item)
        acc = acc + rows[item]
        score_sum += score
    return chosen


def coverage_lambda(seq: InteractionSequence | Sequence[int], catalog: ItemCatalog, lambda_max: float = 1.0) -> float:
    """Trade-off weight growing linearly with the attribute coverage of the history."""
    p = history_distribution(seq, catalog)
    return float(np.count_nonzero(p > 0)) / catalog.attribute_count * lambda_max


def calirec(cands: CandidateList, seq, catalog: ItemCatalog, lam: float, k: int, alpha: float = DEFAULT_ALPHA) -> list[int]:
    return greedy_rerank(cands, history_distribution(seq, catalog), lam, k, catalog, alpha)


def calirec_gc(cands: CandidateList, seq, catalog: ItemCatalog, lambda_max: float, k: int,
               alpha: float = DEFAULT_ALPHA) -> list[int]:
    lam = coverage_lambda(seq, catalog, lambda_max)
    return greedy_rerank(cands, history_distribution(seq, catalog), lam, k, catalog, alpha)


def read_candidates(path: str | Path, catalog: ItemCatalog) -> dict[str, CandidateList]:
    """Parse ``user<TAB>item:score,item:score,...``; entries are re-sorted by score."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                uid, body = line.split("\t")
                pairs = []
                for tok in body.split(","):
                    item, score = tok.rsplit(":", 1)
                    pairs.append((catalog.index_of(item), float(score)))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            pairs.sort(key=lambda t: (-t[1], t[0]))
            out[uid] = CandidateList(tuple(i for i, _ in pairs), tuple(s for _, s in pairs))
    return out


def write_candidates(cands: dict[str, CandidateList], catalog: ItemCatalog, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for uid, c in cands.items():
            body = ",".join(f"{catalog.item_ids[i]}:{s:.9g}" for i, s in zip(c.items, c.scores))
            fh.write(f"{uid}\t{body}\n")
