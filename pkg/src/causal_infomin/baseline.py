"""The biased two-encoder fusion classifier trained with plain cross-entropy."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import netcore
from .checkpoint import ModelCheckpoint
from .netcore import Mlp, TrainConfig
from .synthbias import BiasSpec, DatasetBundle, Sample, Split

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelShape:
    q_dim: int
    v_dim: int
    num_classes: int
    hidden: int = 64
    fusion_hidden: int = 128
    m: int = 4
    d_f: int = 32
    activation: str = "relu"
    fused_activation: str = "relu"

    @classmethod
    def for_spec(cls, spec: BiasSpec, **kw) -> "ModelShape":
        return cls(spec.q_dim, spec.v_dim, spec.num_classes, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


class BiasedModel(nn.Module):
    def __init__(self, shape: ModelShape, seed: int = 0):
        super().__init__()
        self.shape = shape
        g = torch.Generator().manual_seed(seed)
        act = shape.activation
        self.enc_q = Mlp([shape.q_dim, shape.hidden], [act], g)
        self.enc_v = Mlp([shape.v_dim, shape.hidden], [act], g)
        self.fusion = Mlp([2 * shape.hidden, shape.fusion_hidden, shape.m * shape.d_f], [act, shape.fused_activation], g)
        self.head = Mlp([shape.d_f, shape.num_classes], ["identity"], g)

    def backbone_modules(self) -> dict[str, Mlp]:
        return {"enc_q": self.enc_q, "enc_v": self.enc_v, "fusion": self.fusion}

    def backbone_parameters(self):
        for m in self.backbone_modules().values():
            yield from m.parameters()

    def fused(self, q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        """Fused feature sequence, shape (n, m, d_f)."""
        h = torch.cat([self.enc_q(q), self.enc_v(v)], dim=-1)
        return self.fusion(h).reshape(q.shape[0], self.shape.m, self.shape.d_f)

    def pooled(self, q, v) -> torch.Tensor:
        return self.fused(q, v).mean(dim=1)

    def forward(self, q, v) -> torch.Tensor:
        return self.head(self.pooled(q, v))

    def to_checkpoint(self, kind: str = "baseline", config=None, metrics=None) -> ModelCheckpoint:
        modules = {**self.backbone_modules(), "head": self.head}
        cfg = {"shape": self.shape.to_dict(), **(config or {})}
        return ModelCheckpoint.from_modules(kind, modules, cfg, metrics)

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint) -> "BiasedModel":
        model = cls(ModelShape(**ckpt.config["shape"]))
        for name, module in {**model.backbone_modules(), "head": model.head}.items():
            ckpt.load_into(name, module)
        return model


def as_tensors(split: Split) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    return (torch.from_numpy(split.q), torch.from_numpy(split.v), torch.from_numpy(split.labels))


def _single(sample: Sample):
    return torch.from_numpy(np.asarray(sample.q))[None], torch.from_numpy(np.asarray(sample.v))[None]


@torch.no_grad()
def split_logits(forward, split: Split, batch_size: int = 4096) -> torch.Tensor:
    q, v, _ = as_tensors(split)
    return torch.cat([forward(q[i:i + batch_size], v[i:i + batch_size]) for i in range(0, len(split), batch_size)])


def split_accuracy(forward, split: Split) -> float:
    return netcore.accuracy_of(split_logits(forward, split), split.labels)


def extract_features(model: BiasedModel, sample) -> np.ndarray:
    """m x d_f fused features before pooling; a Split gives (n, m, d_f)."""
    with torch.no_grad():
        if isinstance(sample, Split):
            return split_logits(lambda q, v: model.fused(q, v).reshape(q.shape[0], -1), sample).reshape(
                len(sample), model.shape.m, model.shape.d_f).numpy()
        q, v = _single(sample)
        return model.fused(q, v)[0].numpy()


def predict(model: BiasedModel, sample) -> np.ndarray:
    """Softmax class distribution for one sample, or (n, k) for a Split."""
    with torch.no_grad():
        if isinstance(sample, Split):
            return torch.softmax(split_logits(model, sample), dim=-1).numpy()
        q, v = _single(sample)
        return torch.softmax(model(q, v), dim=-1)[0].numpy()


def fit_classifier(
    forward,
    params,
    split: Split,
    cfg: TrainConfig,
    epochs: int | None = None,
    generator: torch.Generator | None = None,
) -> list[float]:
    """Cross-entropy training of ``forward(q, v) -> logits`` over ``params``."""
    q, v, y = as_tensors(split)
    params = list(params)
    g = generator or torch.Generator().manual_seed(cfg.seed)
    opt = netcore.make_optimizer(params, cfg)
    losses = []
    for _ in range(epochs or cfg.epochs):
        batches = netcore.minibatch_indices(len(split), cfg.batch_size, g)
        loss = netcore.train_epoch(
            params, batches, lambda idx: netcore.softmax_cross_entropy(forward(q[idx], v[idx]), y[idx]), cfg, opt)
        losses.append(loss)
    return losses


def evaluate_splits(forward, bundle: DatasetBundle) -> dict[str, float]:
    return {f"{name}_acc": split_accuracy(forward, split) for name, split in bundle.splits().items()}


def train_biased(bundle: DatasetBundle, cfg: TrainConfig, shape: ModelShape | None = None) -> ModelCheckpoint:
    shape = shape or ModelShape.for_spec(bundle.spec)
    model = BiasedModel(shape, seed=cfg.seed)
    losses = fit_classifier(model, model.parameters(), bundle.train, cfg)
    metrics = evaluate_splits(model, bundle)
    metrics["final_loss"] = losses[-1]
    log.info("baseline: %s", {k: round(v, 4) for k, v in metrics.items()})
    return model.to_checkpoint("baseline", {"train": cfg.to_dict()}, metrics)
