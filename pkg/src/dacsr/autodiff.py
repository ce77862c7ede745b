"""Differentiable ops used by the encoders and losses, plus a gradient checker.

Reverse-mode gradients come from torch autograd; this module adds the shape
contracts the rest of the package relies on and an independent central
finite-difference check that never touches autograd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import torch
import torch.nn.functional as F

Tensor = torch.Tensor
Parameter = torch.nn.Parameter


class ShapeError(ValueError):
    pass


def _shape(t: Tensor) -> tuple[int, ...]:
    return tuple(t.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() == 0 or b.dim() == 0 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {_shape(a)} and {_shape(b)}")
    return a @ b


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"add: cannot broadcast {_shape(a)} with {_shape(b)}") from None
    return a + b


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def softmax(x: Tensor, tau: float = 1.0, dim: int = -1) -> Tensor:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    # torch.softmax subtracts the row max internally
    return torch.softmax(x / tau, dim=dim)


def gather(table: Tensor, index: Tensor) -> Tensor:
    """Row lookup ``table[index]`` (embedding gather)."""
    if table.dim() != 2:
        raise ShapeError(f"gather: table must be 2-D, got {_shape(table)}")
    if index.numel() and (int(index.min()) < 0 or int(index.max()) >= table.shape[0]):
        raise ShapeError(f"gather: index out of range for table {_shape(table)}")
    return F.embedding(index, table)


def mean(x: Tensor, dim: int | None = None) -> Tensor:
    return x.mean() if dim is None else x.mean(dim=dim)


def concat(tensors: Iterable[Tensor], dim: int = -1) -> Tensor:
    tensors = list(tensors)
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(a != b for k, (a, b) in enumerate(zip(ref, other)) if k != dim % len(ref)):
            raise ShapeError(f"concat: shapes {tuple(ref)} and {tuple(other)} differ off axis {dim}")
    return torch.cat(tensors, dim=dim)


def cross_entropy(logits: Tensor, target: Tensor | int) -> Tensor:
    """Mean negative log-likelihood of ``target`` under ``softmax(logits)``."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    target = torch.as_tensor(target, dtype=torch.long).reshape(-1)
    if target.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy: {_shape(logits)} logits vs {_shape(target)} targets")
    return F.cross_entropy(logits, target)


def cosine_similarity(u: Tensor, v: Tensor, dim: int = -1) -> Tensor:
    if u.shape != v.shape:
        raise ShapeError(f"cosine_similarity: shapes {_shape(u)} and {_shape(v)} differ")
    return (u * v).sum(dim) / (u.norm(dim=dim) * v.norm(dim=dim))


def detach(t: Tensor) -> Tensor:
    return t.detach()


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``param.grad`` for every reachable parameter."""
    if loss.numel() != 1 or loss.dim() > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {_shape(loss)}")
    if not torch.isfinite(loss).all():
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    loss.backward()


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    coordinates: int
    tolerance: float
    worst: str = ""

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def gradient_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
    names: Iterable[str] | None = None,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``f()`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    Parameters must be float64.
    """
    params = list(params)
    names = list(names) if names is not None else [f"param{i}" for i in range(len(params))]
    for p in params:
        if p.dtype != torch.float64:
            raise TypeError("gradient_check requires float64 parameters")
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    for p in params:
        p.grad = None

    max_rel = max_abs = 0.0
    worst = ""
    count = 0
    with torch.no_grad():
        for name, p, g in zip(names, params, analytic):
            flat = p.view(-1)
            gflat = g.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + epsilon
                up = f().item()
                flat[k] = orig - epsilon
                down = f().item()
                flat[k] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise FloatingPointError(f"non-finite objective while probing {name}[{k}]")
                num = (up - down) / (2 * epsilon)
                a = gflat[k].item()
                abs_err = abs(a - num)
                rel = abs_err / max(abs(a), abs(num), floor)
                count += 1
                max_abs = max(max_abs, abs_err)
                if rel > max_rel:
                    max_rel, worst = rel, f"{name}[{k}]"
    return GradCheckReport(max_rel, max_abs, count, tolerance, worst)
