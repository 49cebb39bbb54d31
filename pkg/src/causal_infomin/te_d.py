"""Rate-distortion confounder branch and total-effect debiasing.

A low-width encoder reads the stop-gradient pooled feature ``z_theta`` and
produces ``z_c``, trained to stay predictive (its own head) while its batch
coding rate is pushed down. The answer comes from ``z_te = z_theta - z_c``.
"""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import netcore
from .baseline import BiasedModel, as_tensors, evaluate_splits
from .checkpoint import ModelCheckpoint
from .errors import InvalidInputError, TrainingDivergedError
from .infomath import cosine_sim, rate_distortion
from .netcore import Mlp, TrainConfig, stop_gradient
from .synthbias import DatasetBundle

log = logging.getLogger(__name__)

DEFAULT_FACTOR = 4
DEFAULT_ALPHA = 0.1
DEFAULT_EPS = 0.5
DEFAULT_EPOCHS = 5

# Features are snapped to multiples of 2**-GRID_BITS so z_theta - z_c and the
# sum back are exact in float64 (both operands sit on a common dyadic grid).
GRID_BITS = 40
_GRID = float(2 ** GRID_BITS)
GRID_LIMIT = 2.0 ** 11


def snap(x: torch.Tensor) -> torch.Tensor:
    """Round to the feature grid; the gradient passes straight through."""
    rounded = torch.round(x.detach() * _GRID) / _GRID
    return rounded + (x - x.detach())


LOSS_COMPONENTS = ("L_con", "L_ce", "L_ce_conf", "R")


class TeDModel(nn.Module):
    def __init__(self, backbone: BiasedModel, factor: int = DEFAULT_FACTOR, alpha: float = DEFAULT_ALPHA,
                 eps: float = DEFAULT_EPS, seed: int = 0, isolate_confounder: bool = False):
        super().__init__()
        d_f, k = backbone.shape.d_f, backbone.shape.num_classes
        if d_f % factor:
            raise InvalidInputError(f"d_f={d_f} not divisible by bias dimension factor {factor}")
        g = torch.Generator().manual_seed(seed + 17)
        self.backbone = backbone
        self.factor = factor
        self.alpha = float(alpha)
        self.eps = float(eps)
        self.isolate_confounder = bool(isolate_confounder)
        self.conf_enc = Mlp([d_f, d_f // factor, d_f], ["tanh", "identity"], g)
        self.conf_head = Mlp([d_f, k], ["identity"], g)
        self.main_head = copy.deepcopy(backbone.head)

    @property
    def bottleneck(self) -> int:
        return self.conf_enc.sizes[1]

    def added_modules(self) -> dict[str, Mlp]:
        return {"conf_enc": self.conf_enc, "conf_head": self.conf_head}

    def z_theta(self, q, v) -> torch.Tensor:
        return snap(self.backbone.pooled(q, v))

    def features(self, q, v) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        z_theta = self.z_theta(q, v)
        z_c = confounder_forward(self, z_theta)
        return z_theta, z_c, total_effect(z_theta, z_c)

    def forward(self, q, v) -> torch.Tensor:
        return self.main_head(self.features(q, v)[2])

    def conf_logits(self, q, v) -> torch.Tensor:
        return self.conf_head(self.features(q, v)[1])

    def to_checkpoint(self, config=None, metrics=None) -> ModelCheckpoint:
        modules = {**self.backbone.backbone_modules(), "head": self.backbone.head, "main_head": self.main_head,
                   **self.added_modules()}
        cfg = {"shape": self.backbone.shape.to_dict(), "factor": self.factor, "alpha": self.alpha, "eps": self.eps,
               "isolate_confounder": self.isolate_confounder, **(config or {})}
        return ModelCheckpoint.from_modules("te_d", modules, cfg, metrics)

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint) -> "TeDModel":
        backbone = BiasedModel.from_checkpoint(ckpt)
        model = cls(backbone, ckpt.config["factor"], ckpt.config["alpha"], ckpt.config["eps"],
                    isolate_confounder=ckpt.config.get("isolate_confounder", False))
        for name in ("main_head", "conf_enc", "conf_head"):
            ckpt.load_into(name, getattr(model, name))
        return model


def confounder_forward(model: TeDModel, z_theta: torch.Tensor) -> torch.Tensor:
    """z_c = conf_enc(stop_gradient(z_theta)), snapped to the feature grid."""
    z_c = snap(model.conf_enc(stop_gradient(z_theta)))
    if bool((z_c.detach().abs() >= GRID_LIMIT).any()):
        raise TrainingDivergedError("confounder feature left the exact-arithmetic range", component="z_c")
    return z_c


def total_effect(z_theta, z_c):
    if tuple(z_theta.shape) != tuple(z_c.shape):
        raise InvalidInputError(f"shape mismatch: {tuple(z_theta.shape)} vs {tuple(z_c.shape)}")
    return z_theta - z_c


def contrastive_from_similarities(s_pos, s_neg):
    """-log(e^s_pos / (e^s_pos + e^s_neg)) = softplus(s_neg - s_pos)."""
    return F.softplus(torch.as_tensor(s_neg) - torch.as_tensor(s_pos))


def contrastive_loss(z_te, z_theta, z_c) -> torch.Tensor:
    """Mean over rows of -log softmax([s(z_te, z_theta), s(z_te, z_c)])[0]."""
    return contrastive_from_similarities(cosine_sim(z_te, z_theta), cosine_sim(z_te, z_c)).mean()


def te_d_loss(model: TeDModel, q, v, y, frozen_z_theta=None) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Joint objective L_con + L_ce + L_ce_conf + alpha * R and its components.

    With ``isolate_confounder`` the confounder branch learns only
    from L_ce_conf and R: inside L_con and L_ce, z_c is a constant, so those
    two losses move the backbone and the main head alone.

    ``frozen_z_theta`` feeds a fixed tensor to the confounder encoder in place
    of the stop-gradient copy of z_theta. At the matching parameters the value
    and the autograd gradient are unchanged; it exists so finite differences
    can hold the stop-gradient input still, as the analytic gradient does.
    """
    z_theta = model.z_theta(q, v)
    z_c = confounder_forward(model, z_theta if frozen_z_theta is None else frozen_z_theta)
    z_c_const = stop_gradient(z_c) if model.isolate_confounder else z_c
    z_te = total_effect(z_theta, z_c_const)
    parts = {
        "L_con": contrastive_loss(z_te, z_theta, z_c_const),
        "L_ce": netcore.softmax_cross_entropy(model.main_head(z_te), y),
        "L_ce_conf": netcore.softmax_cross_entropy(model.conf_head(z_c), y),
        "R": rate_distortion(z_c, model.eps),
    }
    for name, value in parts.items():
        if not bool(torch.isfinite(value.detach())):
            raise TrainingDivergedError(f"non-finite {name}", component=name)
    total = parts["L_con"] + parts["L_ce"] + parts["L_ce_conf"] + model.alpha * parts["R"]
    return total, parts


@dataclass
class TeDResult:
    model: TeDModel
    checkpoint: ModelCheckpoint
    loss_log: list[dict] = field(default_factory=list)


def train_te_d(
    biased_ckpt: ModelCheckpoint,
    bundle: DatasetBundle,
    cfg: TrainConfig,
    alpha: float = DEFAULT_ALPHA,
    eps: float = DEFAULT_EPS,
    factor: int = DEFAULT_FACTOR,
    epochs: int = DEFAULT_EPOCHS,
    isolate_confounder: bool = False,
) -> TeDResult:
    """Joint fine-tuning of backbone, main head and confounder branch for a few epochs."""
    backbone = BiasedModel.from_checkpoint(biased_ckpt)
    model = TeDModel(backbone, factor, alpha, eps, seed=cfg.seed, isolate_confounder=isolate_confounder)
    q, v, y = as_tensors(bundle.train)
    params = list(model.backbone.backbone_parameters()) + [
        p for m in (model.main_head, model.conf_enc, model.conf_head) for p in m.parameters()]
    opt = netcore.make_optimizer(params, cfg)
    g = torch.Generator().manual_seed(cfg.seed + 3)
    loss_log = []
    for epoch in range(1, epochs + 1):
        sums = dict.fromkeys(LOSS_COMPONENTS + ("total",), 0.0)
        nb = 0

        def loss_fn(idx):
            nonlocal nb
            total, parts = te_d_loss(model, q[idx], v[idx], y[idx])
            for name, val in parts.items():
                sums[name] += float(val.detach())
            sums["total"] += float(total.detach())
            nb += 1
            return total

        netcore.train_epoch(params, netcore.minibatch_indices(len(y), cfg.batch_size, g), loss_fn, cfg, opt)
        loss_log.append({"epoch": epoch, **{name: s / nb for name, s in sums.items()}})
    metrics = evaluate_splits(model, bundle)
    metrics["conf_ood_test_acc"] = netcore.accuracy_of(_conf_logits(model, bundle.ood_test), bundle.ood_test.labels)
    metrics["added_params"] = netcore.count_params(*model.added_modules().values())
    metrics["trainable_params"] = sum(p.numel() for p in params)
    log.info("te_d: %s", {k: round(v, 4) for k, v in metrics.items()})
    ckpt = model.to_checkpoint({"train": cfg.to_dict(), "epochs": epochs}, metrics)
    return TeDResult(model, ckpt, loss_log)


@torch.no_grad()
def _conf_logits(model: TeDModel, split) -> torch.Tensor:
    q, v, _ = as_tensors(split)
    return model.conf_logits(q, v)


@torch.no_grad()
def batch_rates(model: TeDModel, split, batch_size: int = 64) -> tuple[float, float]:
    """Mean coding rate of z_c and of z_theta over consecutive minibatches of ``split``."""
    q, v, _ = as_tensors(split)
    rc, rt = [], []
    for i in range(0, len(split) - batch_size + 1, batch_size):
        zt, zc, _ = model.features(q[i:i + batch_size], v[i:i + batch_size])
        rc.append(float(rate_distortion(zc, model.eps)))
        rt.append(float(rate_distortion(zt, model.eps)))
    return float(np.mean(rc)), float(np.mean(rt))


LOSS_CSV_COLUMNS = ("epoch",) + LOSS_COMPONENTS + ("total",)


def write_loss_csv(loss_log: list[dict], path) -> Path:
    """Per-epoch loss components: epoch, L_con, L_ce, L_ce_conf, R, total."""
    from .checkpoint import format_float

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_CSV_COLUMNS)
        for row in loss_log:
            w.writerow([row["epoch"]] + [format_float(row[c]) for c in LOSS_CSV_COLUMNS[1:]])
    return path
