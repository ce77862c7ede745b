"""Attribute preference distributions and the divergences between them.

All functions return plain ``float64`` numpy vectors of length ``|G|``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .catalog import InteractionSequence, ItemCatalog

MASK_VALUE = -1e10
DEFAULT_ALPHA = 0.01


def softmax(x: np.ndarray, tau: float = 1.0) -> np.ndarray:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(x, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _items(seq) -> Sequence[int]:
    return seq.items if isinstance(seq, InteractionSequence) else seq


def history_distribution(seq: InteractionSequence | Sequence[int], catalog: ItemCatalog) -> np.ndarray:
    """Mean attribute row over the items of a history."""
    items = _items(seq)
    if len(items) == 0:
        raise ValueError("empty sequence has no preference distribution")
    return catalog.attr_rows[list(items)].mean(axis=0)


def list_distribution(rec_list: Sequence[int], catalog: ItemCatalog) -> np.ndarray:
    if len(rec_list) == 0:
        raise ValueError("empty recommendation list")
    return catalog.attr_rows[list(rec_list)].sum(axis=0) / len(rec_list)


def soft_list_distribution(scores: np.ndarray, catalog: ItemCatalog, tau: float) -> np.ndarray:
    """Attribute mix of the whole catalog weighted by ``softmax(scores / tau)``."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[-1] != catalog.item_count:
        raise ValueError(f"expected {catalog.item_count} scores, got {scores.shape[-1]}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return softmax(scores, tau) @ catalog.attr_rows


def modify_diversity(p: np.ndarray, tau_div: float) -> np.ndarray:
    return softmax(p, tau_div)


def modify_masked(p: np.ndarray, tau_div: float) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if not np.any(p > 0):
        raise ValueError("all-zero distribution cannot be masked")
    return softmax(np.where(p > 0, p, MASK_VALUE), tau_div)


def target_distribution(p: np.ndarray, mode: str = "raw", tau_div: float | None = None) -> np.ndarray:
    """Calibration target for the training loss: ``raw``, ``diversity`` or ``masked``."""
    if mode == "raw":
        return np.asarray(p, dtype=np.float64)
    if mode == "diversity":
        return modify_diversity(p, 0.5 if tau_div is None else tau_div)
    if mode == "masked":
        return modify_masked(p, 2.0 if tau_div is None else tau_div)
    raise ValueError(f"unknown distribution mode {mode!r}")


def ckl(p: np.ndarray, q: np.ndarray, alpha: float = DEFAULT_ALPHA) -> float:
    """KL(p || q~) with q~ = (1 - alpha) q + alpha p; zero-mass terms of p drop out."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    # q + alpha (p - q) keeps q~ == p bit-exact when q == p
    q_s = q + alpha * (p - q)
    nz = p > 0
    return max(0.0, float(np.sum(p[nz] * np.log(p[nz] / q_s[nz]))))


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(u @ v / (nu * nv))
