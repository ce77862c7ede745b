"""Self-attentive sequence encoder, dot-product scoring and the two training losses."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from . import autodiff as ad
from .catalog import InteractionSequence, ItemCatalog

# padded keys get this logit; exp underflows to exactly 0
_NEG = -1e9
INIT_RANGE = 0.05
LN_EPS = 1e-8


@dataclass
class EncoderConfig:
    hidden_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 1
    dropout_rate: float = 0.2
    max_len: int = 200

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.max_len < 1 or self.num_blocks < 1:
            raise ValueError("max_len and num_blocks must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class CausalSelfAttention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = d // heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, queries, keys, bias):
        b, n, d = queries.shape
        shape = (b, n, self.heads, self.head_dim)
        q = self.q(queries).view(shape).transpose(1, 2)
        k = self.k(keys).view(shape).transpose(1, 2)
        v = self.v(keys).view(shape).transpose(1, 2)
        att = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim) + bias
        att = self.drop(torch.softmax(att, dim=-1))
        return self.out((att @ v).transpose(1, 2).reshape(b, n, d))


class PointwiseFeedForward(nn.Module):
    def __init__(self, d: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d, d)
        self.fc2 = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.drop(self.fc2(self.drop(torch.relu(self.fc1(x)))))


class Block(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.attn_norm = nn.LayerNorm(d, eps=LN_EPS)
        self.attn = CausalSelfAttention(d, heads, dropout)
        self.ffn_norm = nn.LayerNorm(d, eps=LN_EPS)
        self.ffn = PointwiseFeedForward(d, dropout)

    def forward(self, x, bias, keep):
        q = self.attn_norm(x)
        x = q + self.attn(q, x, bias)
        y = self.ffn_norm(x)
        return (y + self.ffn(y)) * keep


class SASRecEncoder(nn.Module):
    """SASRec-lite: item + position embeddings, causal attention blocks.

    Sequences are left-padded; position ``k`` counts back from the newest
    item, so a history encodes identically at any padded width.
    """

    def __init__(self, item_count: int, config: EncoderConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        self.item_count = item_count
        d = config.hidden_dim
        self.item_emb = nn.Embedding(item_count, d)
        self.pos_emb = nn.Embedding(config.max_len, d)
        self.emb_drop = nn.Dropout(config.dropout_rate)
        self.blocks = nn.ModuleList(Block(d, config.num_heads, config.dropout_rate) for _ in range(config.num_blocks))
        self.final_norm = nn.LayerNorm(d, eps=LN_EPS)
        init_uniform(self, generator)

    @property
    def item_embeddings(self) -> torch.Tensor:
        return self.item_emb.weight

    def states(self, items: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Per-position hidden states ``[B, L, d]`` for left-padded ``items``."""
        b, n = items.shape
        if n > self.config.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        keep = mask.unsqueeze(-1).to(self.item_emb.weight.dtype)
        pos = torch.arange(n - 1, -1, -1, device=items.device)
        x = ad.gather(self.item_emb.weight, items) * math.sqrt(self.config.hidden_dim)
        x = self.emb_drop(x + self.pos_emb(pos)) * keep
        causal = torch.ones(n, n, dtype=torch.bool, device=items.device).tril()
        allowed = causal.unsqueeze(0) & mask.unsqueeze(1)
        bias = torch.zeros(allowed.shape, dtype=x.dtype, device=items.device)
        bias = bias.masked_fill(~allowed, _NEG).unsqueeze(1)
        for block in self.blocks:
            x = block(x, bias, keep)
        return self.final_norm(x)

    def forward(self, items: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.states(items, mask)[:, -1]

    def encode(self, seq: InteractionSequence | Sequence[int]) -> torch.Tensor:
        items = seq.items if isinstance(seq, InteractionSequence) else tuple(seq)
        if not items:
            raise ValueError("cannot encode an empty sequence")
        if len(items) > self.config.max_len:
            raise ValueError(f"sequence length {len(items)} exceeds max_len {self.config.max_len}; truncate first")
        x = torch.tensor([items], dtype=torch.long)
        return self(x, torch.ones_like(x, dtype=torch.bool))[0]


def init_uniform(module: nn.Module, generator: torch.Generator | None = None) -> None:
    with torch.no_grad():
        for name, p in module.named_parameters():
            if "norm" in name:
                continue
            p.uniform_(-INIT_RANGE, INIT_RANGE, generator=generator)


def pad_batch(seqs: Sequence[Sequence[int]], max_len: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Left-pad item lists into ``(items, mask)``; only the newest ``max_len`` items are kept."""
    seqs = [s[-max_len:] if max_len else s for s in seqs]
    width = max(len(s) for s in seqs)
    items = np.zeros((len(seqs), width), dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for r, s in enumerate(seqs):
        if len(s):
            items[r, width - len(s):] = s
            mask[r, width - len(s):] = True
    return torch.from_numpy(items), torch.from_numpy(mask)


def score_all(h: torch.Tensor, item_embeddings: torch.Tensor) -> torch.Tensor:
    """Dot-product scores of every item: ``E h^T`` (no bias)."""
    if h.shape[-1] != item_embeddings.shape[-1]:
        raise ad.ShapeError(f"score_all: h {tuple(h.shape)} vs embeddings {tuple(item_embeddings.shape)}")
    return h @ item_embeddings.T


def accuracy_loss(scores: torch.Tensor, target) -> torch.Tensor:
    return ad.cross_entropy(scores, target)


def soft_list_distribution(scores: torch.Tensor, attr_rows: torch.Tensor, tau: float) -> torch.Tensor:
    return ad.matmul(ad.softmax(scores, tau), attr_rows)


def calibration_loss(scores: torch.Tensor, target_dist: torch.Tensor, attr_rows: torch.Tensor, tau: float) -> torch.Tensor:
    """``1 - cos(q_hat, target)`` averaged over the batch."""
    q_hat = soft_list_distribution(scores, attr_rows, tau)
    return (1.0 - ad.cosine_similarity(q_hat, target_dist.to(q_hat.dtype))).mean()


def attr_tensor(catalog: ItemCatalog, dtype=torch.float32) -> torch.Tensor:
    return torch.tensor(np.array(catalog.attr_rows), dtype=dtype)
