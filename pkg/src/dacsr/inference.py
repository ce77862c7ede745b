"""Per-sequence recommenders used by the CLI and the latency benchmark."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .catalog import InteractionSequence, ItemCatalog
from .encoder import SASRecEncoder
from .evaluation import top_k
from .model import DacsrModel, ExtractorNet
from .rerank import CandidateList, calirec, calirec_gc

METHODS = ("calirec", "calirec-gc")


class EncoderSnapshot:
    """Frozen copy of an encoder for one-sequence, last-position inference.

    Equivalent to ``encoder(items, mask)[0]`` in eval mode for an unpadded
    sequence, but with fused Q/K/V projections, no dropout or padding work,
    and only the newest position computed in the final block.
    """

    def __init__(self, encoder: SASRecEncoder):
        cfg = encoder.config
        self.d = cfg.hidden_dim
        self.heads = cfg.num_heads
        self.scale = math.sqrt(cfg.hidden_dim)
        self.att_scale = 1.0 / math.sqrt(cfg.hidden_dim // cfg.num_heads)
        self.max_len = cfg.max_len
        w = lambda t: t.detach().clone()
        self.item_emb = w(encoder.item_emb.weight)
        # reversed so that the last n rows give positions n-1, ..., 0
        self.pos_rev = w(encoder.pos_emb.weight).flip(0)
        self.blocks = []
        for blk in encoder.blocks:
            a = blk.attn
            self.blocks.append((
                (w(blk.attn_norm.weight), w(blk.attn_norm.bias), blk.attn_norm.eps),
                (w(a.q.weight), w(a.q.bias)),
                (w(torch.cat([a.k.weight, a.v.weight])), w(torch.cat([a.k.bias, a.v.bias]))),
                (w(a.out.weight), w(a.out.bias)),
                (w(blk.ffn_norm.weight), w(blk.ffn_norm.bias), blk.ffn_norm.eps),
                (w(blk.ffn.fc1.weight), w(blk.ffn.fc1.bias)),
                (w(blk.ffn.fc2.weight), w(blk.ffn.fc2.bias)),
            ))
        fn = encoder.final_norm
        self.final = (w(fn.weight), w(fn.bias), fn.eps)
        self._masks: dict[int, torch.Tensor] = {}

    def _causal(self, n: int) -> torch.Tensor:
        m = self._masks.get(n)
        if m is None:
            m = torch.full((n, n), -1e9, dtype=self.item_emb.dtype).triu(1)
            self._masks[n] = m
        return m

    def last_state(self, items: Sequence[int]) -> torch.Tensor:
        n = len(items)
        if not 0 < n <= self.max_len:
            raise ValueError(f"sequence length {n} outside 1..{self.max_len}")
        idx = torch.tensor(items, dtype=torch.long)
        x = self.item_emb[idx] * self.scale + self.pos_rev[self.max_len - n :]
        h, dh = self.heads, self.d // self.heads
        last = len(self.blocks) - 1
        for b, (ln1, wq, wkv, wo, ln2, f1, f2) in enumerate(self.blocks):
            q = F.layer_norm(x, (self.d,), ln1[0], ln1[1], ln1[2])
            kv = F.linear(x, *wkv)
            k, v = kv[:, : self.d], kv[:, self.d :]
            if b == last:
                q = q[-1:]
            qq = F.linear(q, *wq)
            if h == 1:
                att = qq @ k.T * self.att_scale
                att = att + (self._causal(n)[-1:] if b == last else self._causal(n))
                ctx = torch.softmax(att, dim=-1) @ v
            else:
                m = qq.shape[0]
                qh = qq.view(m, h, dh).transpose(0, 1)
                kh = k.reshape(n, h, dh).transpose(0, 1)
                vh = v.reshape(n, h, dh).transpose(0, 1)
                att = qh @ kh.transpose(-1, -2) * self.att_scale
                att = att + (self._causal(n)[-1:] if b == last else self._causal(n))
                ctx = (torch.softmax(att, dim=-1) @ vh).transpose(0, 1).reshape(m, self.d)
            x = q + F.linear(ctx, *wo)
            y = F.layer_norm(x, (self.d,), ln2[0], ln2[1], ln2[2])
            x = y + F.linear(torch.relu(F.linear(y, *f1)), *f2)
        return F.layer_norm(x[-1], (self.d,), self.final[0], self.final[1], self.final[2])


def _extract(net: ExtractorNet, x: torch.Tensor) -> torch.Tensor:
    h = x
    for layer in net.layers:
        h = F.linear(torch.relu(h), layer.weight, layer.bias)
    return h + x


class Recommender:
    """Top-K lists straight from a trained encoder or DACSR model.

    The aggregated item table of a DACSR model is computed once, so a call
    costs two encoder passes, one extractor pass and one matrix product.
    """

    def __init__(self, model: nn.Module, max_len: int):
        self.model = model.eval()
        self.max_len = max_len
        with torch.no_grad():
            if isinstance(model, DacsrModel):
                self.encoders = [EncoderSnapshot(model.fp), EncoderSnapshot(model.fc)]
                self.table = model.aggregated_embeddings().detach().clone()
                self.ex_seq = model.ex_seq
            else:
                self.encoders = [EncoderSnapshot(model)]
                self.table = model.item_embeddings.detach().clone()
                self.ex_seq = None

    def scores(self, seq: InteractionSequence | Sequence[int]) -> np.ndarray:
        items = seq.items if isinstance(seq, InteractionSequence) else tuple(seq)
        if not items:
            raise ValueError("cannot score an empty sequence")
        items = items[-self.max_len :]
        with torch.inference_mode():
            if self.ex_seq is None:
                h = self.encoders[0].last_state(items)
            else:
                h = torch.cat([enc.last_state(items) for enc in self.encoders])
                h = _extract(self.ex_seq, h)
            return (self.table @ h).numpy()

    def recommend(self, seq, k: int) -> list[int]:
        return top_k(self.scores(seq), k)


class RerankRecommender:
    """Base-model top-Z candidates followed by greedy calibrated re-ranking."""

    def __init__(self, base: Recommender, catalog: ItemCatalog, method: str = "calirec", lam: float = 0.5,
                 z: int = 100):
        if method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {method!r}")
        self.base = base
        self.catalog = catalog
        self.method = method
        self.lam = lam
        self.z = z

    def recommend(self, seq: InteractionSequence, k: int) -> list[int]:
        cands = CandidateList.from_scores(self.base.scores(seq), self.z)
        if self.method == "calirec":
            return calirec(cands, seq, self.catalog, self.lam, k)
        return calirec_gc(cands, seq, self.catalog, self.lam, k)
