"""Adam, mini-batch training loops, pre-training and validation-based selection."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import autodiff as ad
from .catalog import InteractionSequence, ItemCatalog
from .distribution import target_distribution
from .checkpoint import CheckpointError, ModelCheckpoint
from .encoder import (
    EncoderConfig,
    SASRecEncoder,
    accuracy_loss,
    attr_tensor,
    calibration_loss,
    pad_batch,
    score_all,
)
from .ingest import DatasetSplit
from .model import DacsrModel, total_loss, weighted_loss

log = logging.getLogger(__name__)

Pair = tuple[InteractionSequence, int]


class TrainingError(RuntimeError):
    pass


class NonFiniteGradient(TrainingError):
    pass


class TrainingDiverged(TrainingError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 100
    pretrain_epochs: int = 20
    patience: int = 10
    seed: int = 0
    select_metric: str = "recall"
    select_k: int = 20
    dist_mode: str = "raw"
    tau_div: float | None = None

    def __post_init__(self):
        if self.select_metric not in ("recall", "mrr"):
            raise ValueError(f"select_metric must be recall or mrr, got {self.select_metric!r}")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# Adam


def adam_step(params, grads, state: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place.

    ``state`` holds ``t`` (steps taken) and per-parameter ``m``/``v`` lists,
    created as zeros on first use. A non-finite gradient aborts before any
    parameter or moment changes.
    """
    params = list(params)
    grads = list(grads)
    for g in grads:
        if not torch.isfinite(g).all():
            raise NonFiniteGradient("non-finite gradient; step aborted")
    if "m" not in state:
        state["t"] = state.get("t", 0)
        state["m"] = [torch.zeros_like(p) for p in params]
        state["v"] = [torch.zeros_like(p) for p in params]
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state["m"], state["v"]):
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))


class Adam:
    def __init__(self, named_params: Sequence[tuple[str, torch.Tensor]], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict = {"t": 0}
        self.best_moments: dict = {}
        self.best_steps = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        try:
            adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
        finally:
            self.zero_grad()

    def moments(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        if "m" not in self.state:
            return {}
        return {
            n: (m.detach().numpy().copy(), v.detach().numpy().copy())
            for n, m, v in zip(self.names, self.state["m"], self.state["v"])
        }


# --------------------------------------------------------------------------
# data


def history_matrix(items: np.ndarray, mask: np.ndarray, catalog: ItemCatalog) -> np.ndarray:
    rows = catalog.attr_rows[items] * mask[..., None]
    return rows.sum(axis=1) / mask.sum(axis=1, keepdims=True)


class PairTensors:
    """Left-padded (prefix, target) pairs with their calibration targets."""

    def __init__(self, pairs: Sequence[Pair], catalog: ItemCatalog, max_len: int,
                 dist_mode: str = "raw", tau_div: float | None = None):
        if not pairs:
            raise ValueError("no (sequence, target) pairs")
        items, mask = pad_batch([seq.items for seq, _ in pairs], max_len)
        self.items = items
        self.mask = mask
        self.targets = torch.tensor([t for _, t in pairs], dtype=torch.long)
        hist = history_matrix(items.numpy(), mask.numpy(), catalog)
        self.target_dist = torch.from_numpy(target_distribution(hist, dist_mode, tau_div)).float()

    def __len__(self) -> int:
        return self.targets.shape[0]

    def batch(self, idx) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        idx = torch.as_tensor(idx, dtype=torch.long)
        items, mask = self.items[idx], self.mask[idx]
        used = mask.any(dim=0)
        first = int(used.to(torch.int64).argmax()) if used.any() else mask.shape[1] - 1
        return items[:, first:], mask[:, first:], self.targets[idx], self.target_dist[idx]


# --------------------------------------------------------------------------
# scoring helpers


def encoder_scores(encoder: SASRecEncoder, items, mask) -> torch.Tensor:
    return score_all(encoder(items, mask), encoder.item_embeddings)


def model_scores(model: nn.Module, items, mask, item_table=None) -> torch.Tensor:
    if isinstance(model, DacsrModel):
        return model.score(items, mask, item_table)
    return encoder_scores(model, items, mask)


@torch.no_grad()
def predict_scores(model: nn.Module, data: PairTensors, chunk: int = 1024) -> np.ndarray:
    was = model.training
    model.eval()
    table = model.aggregated_embeddings() if isinstance(model, DacsrModel) else None
    out = []
    for lo in range(0, len(data), chunk):
        items, mask, _, _ = data.batch(range(lo, min(lo + chunk, len(data))))
        out.append(model_scores(model, items, mask, table).numpy())
    model.train(was)
    return np.concatenate(out)


def target_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """0-based rank of each target under the score-then-index ordering."""
    t = scores[np.arange(len(targets)), targets][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    return ((scores > t) | ((scores == t) & (idx < targets[:, None]))).sum(axis=1)


def ranking_metric(scores: np.ndarray, targets: np.ndarray, metric: str, k: int) -> float:
    ranks = target_ranks(scores, np.asarray(targets))
    hit = ranks < k
    if metric == "recall":
        return float(hit.mean())
    return float(np.where(hit, 1.0 / (ranks + 1), 0.0).mean())


# --------------------------------------------------------------------------
# loops


@dataclass
class FitResult:
    module: nn.Module
    best_epoch: int
    best_value: float
    history: list[dict] = field(default_factory=list)
    optimizer: Adam | None = None


def _fit(module: nn.Module, loss_fn: Callable, train: PairTensors, validate: Callable[[nn.Module], float],
         config: TrainConfig, epochs: int, maximize: bool, label: str) -> FitResult:
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    opt = Adam(named, lr=config.learning_rate)
    # the untrained state is only returned when no epoch runs at all
    best_value = validate(module)
    best_state = copy.deepcopy(module.state_dict())
    best_moments: dict = {}
    best_steps = 0
    best_epoch = 0
    history = [{"epoch": 0, "valid": best_value}]
    stale = 0
    for epoch in range(1, epochs + 1):
        module.train()
        order = rng.permutation(len(train))
        losses = []
        for b, lo in enumerate(range(0, len(train), config.batch_size)):
            items, mask, targets, tdist = train.batch(order[lo : lo + config.batch_size])
            loss = loss_fn(module, items, mask, targets, tdist)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"{label}: non-finite loss at epoch {epoch}, batch {b}")
            ad.backward(loss)
            try:
                opt.step()
            except NonFiniteGradient as exc:
                raise NonFiniteGradient(f"{label}: epoch {epoch}, batch {b}: {exc}") from None
            losses.append(loss.item())
        module.eval()
        value = validate(module)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "valid": value})
        log.info("%s epoch %d loss %.4f valid %.4f", label, epoch, history[-1]["train_loss"], value)
        better = value > best_value if maximize else value < best_value
        if better or best_epoch == 0:
            best_value, best_epoch, stale = value, epoch, 0
            best_state = copy.deepcopy(module.state_dict())
            best_moments, best_steps = opt.moments(), opt.state["t"]
        else:
            stale += 1
            if stale >= config.patience:
                break
    module.load_state_dict(best_state)
    module.eval()
    opt.best_moments, opt.best_steps = best_moments, best_steps
    return FitResult(module, best_epoch, best_value, history, opt)


def _attr(catalog: ItemCatalog) -> torch.Tensor:
    return attr_tensor(catalog, torch.float32)


@torch.no_grad()
def mean_loss(module: nn.Module, loss_fn: Callable, data: PairTensors, chunk: int = 1024) -> float:
    was = module.training
    module.eval()
    total = 0.0
    for lo in range(0, len(data), chunk):
        idx = range(lo, min(lo + chunk, len(data)))
        total += loss_fn(module, *data.batch(idx)).item() * len(idx)
    module.train(was)
    return total / len(data)


def acc_objective(module, items, mask, targets, tdist):
    return accuracy_loss(encoder_scores(module, items, mask), targets)


def calib_objective(attr: torch.Tensor, tau: float):
    def f(module, items, mask, targets, tdist):
        return calibration_loss(encoder_scores(module, items, mask), tdist, attr, tau)
    return f


def pretrain_encoder(encoder: SASRecEncoder, dataset: DatasetSplit, config: TrainConfig, objective: str,
                     tau: float = 1.0, data: tuple[PairTensors, PairTensors] | None = None) -> FitResult:
    """Train one encoder on ``acc`` or ``calib`` alone, keeping the best validation-loss epoch."""
    train, valid = data or _tensors(dataset, config)
    loss_fn = acc_objective if objective == "acc" else calib_objective(_attr(dataset.catalog), tau)
    return _fit(encoder, loss_fn, train, lambda m: mean_loss(m, loss_fn, valid), config,
                config.pretrain_epochs, maximize=False, label=f"pretrain-{objective}")


def _tensors(dataset: DatasetSplit, config: TrainConfig) -> tuple[PairTensors, PairTensors]:
    if not dataset.train:
        raise TrainingError("empty training set")
    return (
        PairTensors(dataset.train, dataset.catalog, dataset.max_len, config.dist_mode, config.tau_div),
        PairTensors(dataset.validation, dataset.catalog, dataset.max_len, config.dist_mode, config.tau_div),
    )


def _generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def encoder_checkpoint(encoder: SASRecEncoder, role: str, config: TrainConfig | None = None,
                       epoch: int = 0, metric: float | None = None, optimizer: Adam | None = None) -> ModelCheckpoint:
    prefix = f"encoder.{role}."
    params = {prefix + n: p.detach().numpy().astype(np.float32).copy() for n, p in encoder.named_parameters()}
    moments = {}
    steps = 0
    if optimizer is not None:
        moments = {prefix + n: mv for n, mv in optimizer.best_moments.items()}
        steps = optimizer.best_steps
    cfg = {"item_count": encoder.item_count, "encoder": encoder.config.to_dict(), "role": role}
    if config is not None:
        cfg["train"] = config.to_dict()
    return ModelCheckpoint("encoder", params, cfg, moments, steps, epoch, metric)


def dacsr_checkpoint(model: DacsrModel, config: TrainConfig | None = None, epoch: int = 0,
                     metric: float | None = None, optimizer: Adam | None = None) -> ModelCheckpoint:
    params = {"dacsr." + n: p.detach().numpy().astype(np.float32).copy() for n, p in model.named_parameters()}
    moments = {}
    steps = 0
    if optimizer is not None:
        moments = {"dacsr." + n: mv for n, mv in optimizer.best_moments.items()}
        steps = optimizer.best_steps
    cfg = {
        "item_count": model.item_count,
        "encoder": model.config.to_dict(),
        "lam": model.lam,
        "tau": model.tau,
        "extractor_layers": len(model.ex_seq.layers),
        "detach_encoders": model.detach_encoders,
    }
    if config is not None:
        cfg["train"] = config.to_dict()
    return ModelCheckpoint("dacsr", params, cfg, moments, steps, epoch, metric)


def model_from_checkpoint(ckpt: ModelCheckpoint, item_count: int | None = None) -> nn.Module:
    cfg = ckpt.config
    if item_count is not None and cfg["item_count"] != item_count:
        raise CheckpointError(f"checkpoint built for {cfg['item_count']} items, catalog has {item_count}")
    enc_cfg = EncoderConfig(**cfg["encoder"])
    if ckpt.kind == "dacsr":
        model = DacsrModel(cfg["item_count"], enc_cfg, cfg["lam"], cfg["tau"], cfg["extractor_layers"],
                           cfg["detach_encoders"])
        state = ckpt.state_dict("dacsr.")
    elif ckpt.kind == "encoder":
        model = SASRecEncoder(cfg["item_count"], enc_cfg)
        state = ckpt.state_dict(f"encoder.{cfg['role']}.")
    else:
        raise CheckpointError(f"unknown checkpoint kind {ckpt.kind!r}")
    expected = dict(model.named_parameters())
    for name, p in expected.items():
        if name not in state or tuple(state[name].shape) != tuple(p.shape):
            got = tuple(state[name].shape) if name in state else None
            raise CheckpointError(f"parameter {name}: expected shape {tuple(p.shape)}, checkpoint has {got}")
    model.load_state_dict(state)
    model.eval()
    return model


def pretrain(dataset: DatasetSplit, config: TrainConfig, encoder_config: EncoderConfig,
             tau: float = 1.0) -> tuple[ModelCheckpoint, ModelCheckpoint]:
    """Pre-train the accuracy and calibration encoders independently."""
    data = _tensors(dataset, config)
    n = dataset.catalog.item_count
    fp = SASRecEncoder(n, encoder_config, _generator(config.seed))
    fc = SASRecEncoder(n, encoder_config, _generator(config.seed + 1))
    out = []
    for enc, role, objective in ((fp, "fp", "acc"), (fc, "fc", "calib")):
        if config.pretrain_epochs > 0:
            res = pretrain_encoder(enc, dataset, config, objective, tau, data)
            out.append(encoder_checkpoint(enc, role, config, res.best_epoch, res.best_value, res.optimizer))
        else:
            out.append(encoder_checkpoint(enc, role, config))
    return out[0], out[1]


def train(model: nn.Module, dataset: DatasetSplit, config: TrainConfig, encoder_lam: float = 0.0,
          encoder_tau: float = 1.0, role: str = "sasrec",
          data: tuple[PairTensors, PairTensors] | None = None) -> tuple[ModelCheckpoint, FitResult]:
    """Train a DACSR model or a single encoder; keep the best validation epoch.

    A single encoder optimises the weighted loss with ``encoder_lam``
    (0 gives the plain accuracy objective).
    """
    train_t, valid_t = data or _tensors(dataset, config)
    attr = _attr(dataset.catalog)
    targets = valid_t.targets.numpy()

    if isinstance(model, DacsrModel):
        def loss_fn(m, items, mask, tgt, tdist):
            return total_loss(m, items, mask, tgt, tdist, attr)
    else:
        def loss_fn(m, items, mask, tgt, tdist):
            return weighted_loss(encoder_scores(m, items, mask), tgt, tdist, encoder_lam, encoder_tau, attr)

    def validate(m):
        return ranking_metric(predict_scores(m, valid_t), targets, config.select_metric, config.select_k)

    res = _fit(model, loss_fn, train_t, validate, config, config.max_epochs, maximize=True, label="train")
    if isinstance(model, DacsrModel):
        ckpt = dacsr_checkpoint(model, config, res.best_epoch, res.best_value, res.optimizer)
    else:
        ckpt = encoder_checkpoint(model, role, config, res.best_epoch, res.best_value, res.optimizer)
    return ckpt, res


def build_dacsr(dataset: DatasetSplit, config: TrainConfig, encoder_config: EncoderConfig, lam: float = 0.5,
                tau: float = 1.0, extractor_layers: int = 2, detach_encoders: bool = True,
                pretrained: tuple[ModelCheckpoint, ModelCheckpoint] | None = None) -> DacsrModel:
    model = DacsrModel(dataset.catalog.item_count, encoder_config, lam, tau, extractor_layers,
                       detach_encoders, _generator(config.seed + 2))
    if pretrained is not None:
        fp_ckpt, fc_ckpt = pretrained
        model.fp.load_state_dict(fp_ckpt.state_dict("encoder.fp."))
        model.fc.load_state_dict(fc_ckpt.state_dict("encoder.fc."))
    return model


def train_dacsr(dataset: DatasetSplit, config: TrainConfig, encoder_config: EncoderConfig, lam: float = 0.5,
                tau: float = 1.0, extractor_layers: int = 2, detach_encoders: bool = True,
                pretrained: tuple[ModelCheckpoint, ModelCheckpoint] | None = None):
    """Pre-train (unless given pre-trained encoders), then train all three loss terms jointly."""
    if pretrained is None and config.pretrain_epochs > 0:
        pretrained = pretrain(dataset, config, encoder_config, tau)
    model = build_dacsr(dataset, config, encoder_config, lam, tau, extractor_layers, detach_encoders, pretrained)
    return train(model, dataset, config)
