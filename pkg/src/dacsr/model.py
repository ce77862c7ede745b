"""Decoupled-aggregated calibrated model: two encoders fused by extractor nets."""

from __future__ import annotations

import torch
import torch.nn as nn

from . import autodiff as ad
from .encoder import (
    EncoderConfig,
    SASRecEncoder,
    accuracy_loss,
    calibration_loss,
    init_uniform,
    score_all,
)


class ExtractorNet(nn.Module):
    """``t`` square layers ``h_i = W_i relu(h_{i-1}) + b_i`` plus an input residual."""

    def __init__(self, width: int, layers: int = 2):
        super().__init__()
        if layers < 1:
            raise ValueError("extractor needs at least one layer")
        self.width = width
        self.layers = nn.ModuleList(nn.Linear(width, width) for _ in range(layers))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.width:
            raise ad.ShapeError(f"extractor expects width {self.width}, got {tuple(x.shape)}")
        h = x
        for layer in self.layers:
            h = layer(ad.relu(h))
        return h + x

    def zero_(self) -> "ExtractorNet":
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self


def extract(net: ExtractorNet, x: torch.Tensor) -> torch.Tensor:
    return net(x)


class DacsrModel(nn.Module):
    """Accuracy encoder ``fp`` and calibration encoder ``fc`` with separate parameters.

    With ``detach_encoders`` (the default) the aggregated branch sees encoder
    outputs through ``detach`` so the weighted loss only trains the extractors.
    """

    def __init__(
        self,
        item_count: int,
        config: EncoderConfig,
        lam: float = 0.5,
        tau: float = 1.0,
        extractor_layers: int = 2,
        detach_encoders: bool = True,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {lam}")
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.config = config
        self.item_count = item_count
        self.lam = lam
        self.tau = tau
        self.detach_encoders = detach_encoders
        self.fp = SASRecEncoder(item_count, config, generator)
        self.fc = SASRecEncoder(item_count, config, generator)
        width = 2 * config.hidden_dim
        self.ex_seq = ExtractorNet(width, extractor_layers)
        self.ex_emb = ExtractorNet(width, extractor_layers)
        init_uniform(self.ex_seq, generator)
        init_uniform(self.ex_emb, generator)

    def _fuse(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if self.detach_encoders:
            a, b = ad.detach(a), ad.detach(b)
        return ad.concat([a, b], dim=-1)

    def aggregated_embeddings(self) -> torch.Tensor:
        return self.ex_emb(self._fuse(self.fp.item_embeddings, self.fc.item_embeddings))

    def forward(self, items: torch.Tensor, mask: torch.Tensor, item_table: torch.Tensor | None = None):
        """Return ``(y_a, y_p, y_c)`` score matrices of shape ``[B, |I|]``.

        ``item_table`` lets evaluation reuse a cached aggregated embedding table.
        """
        h_p = self.fp(items, mask)
        h_c = self.fc(items, mask)
        y_p = score_all(h_p, self.fp.item_embeddings)
        y_c = score_all(h_c, self.fc.item_embeddings)
        h_a = self.ex_seq(self._fuse(h_p, h_c))
        e_a = self.aggregated_embeddings() if item_table is None else item_table
        return score_all(h_a, e_a), y_p, y_c

    def score(self, items: torch.Tensor, mask: torch.Tensor, item_table: torch.Tensor | None = None) -> torch.Tensor:
        h_p = self.fp(items, mask)
        h_c = self.fc(items, mask)
        e_a = self.aggregated_embeddings() if item_table is None else item_table
        return score_all(self.ex_seq(self._fuse(h_p, h_c)), e_a)


def aggregate_forward(model: DacsrModel, items: torch.Tensor, mask: torch.Tensor):
    return model(items, mask)


def weighted_loss(y_a, target, target_dist, lam: float, tau: float, attr_rows) -> torch.Tensor:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return accuracy_loss(y_a, target)
    if lam == 1.0:
        return calibration_loss(y_a, target_dist, attr_rows, tau)
    return (1.0 - lam) * accuracy_loss(y_a, target) + lam * calibration_loss(y_a, target_dist, attr_rows, tau)


def total_loss(model: DacsrModel, items, mask, target, target_dist, attr_rows) -> torch.Tensor:
    """Weighted loss on the aggregated scores plus each encoder's own loss."""
    y_a, y_p, y_c = model(items, mask)
    return (
        weighted_loss(y_a, target, target_dist, model.lam, model.tau, attr_rows)
        + accuracy_loss(y_p, target)
        + calibration_loss(y_c, target_dist, attr_rows, model.tau)
    )
