"""Small dense networks, losses, the training loop and a finite-difference gradient checker.

All math runs in float64 on CPU.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidInputError, TrainingDivergedError

DTYPE = torch.float64
ACTIVATIONS = ("relu", "tanh", "identity")
_GAINS = {"relu": math.sqrt(2.0), "tanh": 5.0 / 3.0, "identity": 1.0}

torch.set_default_dtype(DTYPE)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be > 0")
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class Mlp(nn.Module):
    """Stack of dense layers, each followed by its own activation."""

    def __init__(self, sizes: Sequence[int], activations: Sequence[str], generator: torch.Generator | None = None):
        super().__init__()
        if len(sizes) < 2 or len(activations) != len(sizes) - 1:
            raise InvalidInputError("need len(activations) == len(sizes) - 1 >= 1")
        for a in activations:
            if a not in ACTIVATIONS:
                raise InvalidInputError(f"unknown activation {a!r}")
        self.sizes = [int(s) for s in sizes]
        self.activations = list(activations)
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for fan_in, fan_out, act in zip(self.sizes[:-1], self.sizes[1:], self.activations):
            bound = _GAINS[act] * math.sqrt(3.0 / fan_in)
            w = (torch.rand(fan_out, fan_in, generator=generator, dtype=DTYPE) * 2 - 1) * bound
            self.weights.append(nn.Parameter(w))
            self.biases.append(nn.Parameter(torch.zeros(fan_out, dtype=DTYPE)))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise InvalidInputError(f"input has {x.shape[-1]} columns, network expects {self.in_dim}")
        for w, b, act in zip(self.weights, self.biases, self.activations):
            x = F.linear(x, w, b)
            if act == "relu":
                x = torch.relu(x)
            elif act == "tanh":
                x = torch.tanh(x)
        return x

    def layers(self) -> list[tuple[torch.Tensor, torch.Tensor]]:
        return [(w, b) for w, b in zip(self.weights, self.biases)]


def mlp_apply(params: Mlp, x) -> torch.Tensor:
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(np.asarray(x, dtype=np.float64))
    if x.ndim == 1:
        return params(x.unsqueeze(0)).squeeze(0)
    return params(x)


def count_params(*modules: nn.Module) -> int:
    return sum(p.numel() for m in modules for p in m.parameters())


def softmax_cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise InvalidInputError("need one integer label per logit row")
    k = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise InvalidInputError(f"labels must lie in [0, {k})")
    return F.cross_entropy(logits, labels)


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    return x.detach()


def make_optimizer(params: Iterable[torch.nn.Parameter], cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(list(params), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def minibatch_indices(n: int, batch_size: int, generator: torch.Generator) -> list[torch.Tensor]:
    perm = torch.randperm(n, generator=generator)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def train_epoch(
    params: Sequence[torch.nn.Parameter],
    batches: Iterable,
    loss_fn: Callable[[object], torch.Tensor],
    config: TrainConfig,
    optimizer: torch.optim.Optimizer | None = None,
) -> float:
    """One pass of AdamW updates over ``batches``; returns the mean batch loss.

    Pass the same ``optimizer`` across epochs to keep its moment estimates.
    """
    params = list(params)
    if optimizer is None:
        optimizer = make_optimizer(params, config)
    total, count = 0.0, 0
    for i, batch in enumerate(batches):
        optimizer.zero_grad(set_to_none=True)
        loss = loss_fn(batch)
        if not bool(torch.isfinite(loss.detach())):
            raise TrainingDivergedError(f"non-finite loss at batch {i}", batch_index=i)
        loss.backward()
        if config.grad_clip_norm and config.grad_clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip_norm)
        optimizer.step()
        total += float(loss.detach())
        count += 1
    return total / max(count, 1)


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    n_entries: int = 0
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: dict[str, torch.Tensor] | Sequence[torch.Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd gradients with central differences, entry by entry.

    ``loss_fn`` is called with no arguments and must read the current values of
    ``params``. Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``.
    Failures are reported, never raised.
    """
    if not step > 0:
        raise InvalidInputError("step must be > 0")
    named = dict(params) if isinstance(params, dict) else {str(i): p for i, p in enumerate(params)}
    tensors = list(named.values())
    for p in tensors:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    report = GradCheckReport(max_rel_error=0.0, tol=tol)
    with torch.no_grad():
        for (name, p), g in zip(named.items(), grads):
            analytic = torch.zeros_like(p) if g is None else g.detach()
            flat = p.view(-1)
            worst = 0.0
            for j in range(flat.numel()):
                orig = float(flat[j])
                flat[j] = orig + step
                up = float(loss_fn())
                flat[j] = orig - step
                down = float(loss_fn())
                flat[j] = orig
                numeric = (up - down) / (2 * step)
                a = float(analytic.view(-1)[j])
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
            report.per_param[name] = worst
            report.n_entries += flat.numel()
            report.max_rel_error = max(report.max_rel_error, worst)
    return report


def accuracy_of(logits: torch.Tensor, labels) -> float:
    labels = torch.as_tensor(labels, dtype=torch.long)
    return float((logits.argmax(-1) == labels).double().mean())
