"""Autoencoder confounders, a k-means confounder dictionary and similarity-based recalibration.

The biased model's fused vectors are compressed by a small autoencoder; the
k-means centroids of the codes form the confounder dictionary. Each fused
vector is then scaled by one minus its mean cosine similarity to the
centroids, and only the answer head is retrained on the rescaled features.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import netcore
from .baseline import BiasedModel, as_tensors, evaluate_splits, fit_classifier
from .checkpoint import ModelCheckpoint
from .errors import InvalidInputError
from .infomath import cosine_sim
from .netcore import Mlp, TrainConfig
from .synthbias import DatasetBundle

log = logging.getLogger(__name__)

DEFAULT_K = 10
DEFAULT_FACTOR = 4


class Autoencoder(nn.Module):
    def __init__(self, d_in: int, latent_dim: int, hidden: int | None = None, seed: int = 0):
        super().__init__()
        if not 1 <= latent_dim <= d_in:
            raise InvalidInputError(f"latent_dim must be in [1, {d_in}]")
        hidden = hidden or max(latent_dim, d_in // 2)
        g = torch.Generator().manual_seed(seed)
        self.latent_dim = latent_dim
        self.enc = Mlp([d_in, hidden, latent_dim], ["tanh", "identity"], g)
        self.dec = Mlp([latent_dim, hidden, d_in], ["tanh", "identity"], g)

    def forward(self, r: torch.Tensor) -> torch.Tensor:
        return self.dec(self.enc(r))


def reconstruction_loss(ae: Autoencoder, r: torch.Tensor) -> torch.Tensor:
    """Mean over rows of the squared Euclidean distance between r and its reconstruction."""
    return ((r - ae(r)) ** 2).sum(-1).mean()


@dataclass
class AutoencoderResult:
    ae: Autoencoder
    initial_loss: float
    final_loss: float


def train_autoencoder(
    features, cfg: TrainConfig, latent_dim: int | None = None, factor: int = DEFAULT_FACTOR, hidden: int | None = None
) -> AutoencoderResult:
    """Fit the autoencoder on stacked fused vectors (rows = vectors)."""
    r = torch.as_tensor(np.asarray(features, dtype=np.float64))
    if r.ndim != 2:
        raise InvalidInputError("features must be a 2-D matrix of stacked vectors")
    d = r.shape[1]
    latent_dim = latent_dim or max(1, d // factor)
    ae = Autoencoder(d, latent_dim, hidden, seed=cfg.seed)
    with torch.no_grad():
        initial = float(reconstruction_loss(ae, r))
    g = torch.Generator().manual_seed(cfg.seed + 1)
    opt = netcore.make_optimizer(ae.parameters(), cfg)
    final = initial
    for _ in range(cfg.epochs):
        batches = netcore.minibatch_indices(r.shape[0], cfg.batch_size, g)
        netcore.train_epoch(list(ae.parameters()), batches, lambda idx: reconstruction_loss(ae, r[idx]), cfg, opt)
    with torch.no_grad():
        final = float(reconstruction_loss(ae, r))
    log.info("autoencoder reconstruction loss %.5f -> %.5f", initial, final)
    return AutoencoderResult(ae, initial, final)


@dataclass
class ConfounderDictionary:
    centroids: np.ndarray
    iterations: int = 0

    @property
    def K(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def latent_dim(self) -> int:
        return int(self.centroids.shape[1])


def encode(ae: Autoencoder, features) -> np.ndarray:
    with torch.no_grad():
        return ae.enc(torch.as_tensor(np.asarray(features, dtype=np.float64))).numpy()


def kmeans(points: np.ndarray, K: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> tuple[np.ndarray, int]:
    """Lloyd's k-means with seeded farthest-point initialization."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if K < 1:
        raise InvalidInputError("K must be >= 1")
    if K > len(np.unique(points, axis=0)):
        raise InvalidInputError(f"K={K} exceeds the number of distinct points")
    rng = np.random.default_rng(seed)
    centers = [points[rng.integers(n)]]
    d2 = ((points - centers[0]) ** 2).sum(1)
    for _ in range(1, K):
        centers.append(points[int(np.argmax(d2))])
        d2 = np.minimum(d2, ((points - centers[-1]) ** 2).sum(1))
    centers = np.stack(centers)
    it = 0
    for it in range(1, max_iter + 1):
        dist = ((points[:, None, :] - centers[None]) ** 2).sum(-1) if n * K < 4_000_000 else _chunked_dist(points, centers)
        assign = dist.argmin(1)
        new = centers.copy()
        for j in range(K):
            members = points[assign == j]
            if len(members):
                new[j] = members.mean(0)
        shift = np.abs(new - centers).max()
        centers = new
        if shift < tol:
            break
    return centers, it


def _chunked_dist(points, centers, chunk=50_000):
    return np.concatenate(
        [((points[i:i + chunk, None, :] - centers[None]) ** 2).sum(-1) for i in range(0, len(points), chunk)])


def build_dictionary(ae: Autoencoder, features, K: int = DEFAULT_K, seed: int = 0) -> ConfounderDictionary:
    codes = encode(ae, features)
    centers, iters = kmeans(codes, K, seed=seed)
    return ConfounderDictionary(centers, iters)


def confounder_weights(r_seq: torch.Tensor, ae: Autoencoder, dictionary: ConfounderDictionary) -> torch.Tensor:
    """w_i = 1 - mean_j cos(F_enc(r_i), c_j), computed over the last axis of ``r_seq``."""
    codes = ae.enc(r_seq)
    cents = torch.as_tensor(dictionary.centroids, dtype=codes.dtype)
    sims = cosine_sim(codes.unsqueeze(-2), cents)  # (..., K)
    return 1.0 - sims.mean(-1)


def recalibrate(r_seq, ae: Autoencoder, dictionary: ConfounderDictionary, invert: bool = False):
    """Scale each row r_i of an (m, d_f) or (n, m, d_f) sequence by its confounder weight.

    ``invert=True`` uses 2 - w_i instead (the ablation that favours confounder-like vectors).
    """
    is_tensor = isinstance(r_seq, torch.Tensor)
    r = r_seq if is_tensor else torch.as_tensor(np.asarray(r_seq, dtype=np.float64))
    with torch.no_grad():
        w = confounder_weights(r, ae, dictionary)
        if invert:
            w = 2.0 - w
        out = w.unsqueeze(-1) * r
    return out if is_tensor else out.numpy()


class RecalibratedClassifier(nn.Module):
    """Frozen backbone and autoencoder; recalibrated mean-pooled features into a trainable head."""

    def __init__(self, model: BiasedModel, ae: Autoencoder, dictionary: ConfounderDictionary, invert: bool = False):
        super().__init__()
        self.model = model
        self.ae = ae
        self.dictionary = dictionary
        self.invert = invert
        for p in list(model.backbone_parameters()) + list(ae.parameters()):
            p.requires_grad_(False)

    @property
    def head(self) -> Mlp:
        return self.model.head

    def recalibrated_pooled(self, q, v) -> torch.Tensor:
        with torch.no_grad():
            r = self.model.fused(q, v)
            return recalibrate(r, self.ae, self.dictionary, invert=self.invert).mean(1)

    def forward(self, q, v) -> torch.Tensor:
        return self.head(self.recalibrated_pooled(q, v))


def finetune_recalibrated(
    model: BiasedModel,
    ae: Autoencoder,
    dictionary: ConfounderDictionary,
    bundle: DatasetBundle,
    cfg: TrainConfig,
    invert: bool = False,
) -> tuple[RecalibratedClassifier, ModelCheckpoint]:
    """Retrain only the head on recalibrated features; recalibration also applies at inference.

    Works on copies: the passed-in model and autoencoder are left untouched.
    """
    model, ae = copy.deepcopy(model), copy.deepcopy(ae)
    clf = RecalibratedClassifier(model, ae, dictionary, invert=invert)
    # cache recalibrated features once: the backbone is frozen
    q, v, y = as_tensors(bundle.train)
    feats = torch.cat([clf.recalibrated_pooled(q[i:i + 4096], v[i:i + 4096]) for i in range(0, len(y), 4096)])
    head = clf.head
    g = torch.Generator().manual_seed(cfg.seed + 2)
    opt = netcore.make_optimizer(head.parameters(), cfg)
    for _ in range(cfg.epochs):
        batches = netcore.minibatch_indices(len(y), cfg.batch_size, g)
        netcore.train_epoch(list(head.parameters()), batches,
                            lambda idx: netcore.softmax_cross_entropy(head(feats[idx]), y[idx]), cfg, opt)
    metrics = evaluate_splits(clf, bundle)
    metrics["trainable_params"] = netcore.count_params(head)
    kind = "ate_d_inverted" if invert else "ate_d"
    log.info("%s: %s", kind, {k: round(v, 4) for k, v in metrics.items()})
    ckpt = ModelCheckpoint.from_modules(
        kind,
        {**model.backbone_modules(), "head": model.head, "ae": ae},
        {"shape": model.shape.to_dict(), "latent_dim": ae.latent_dim, "ae_hidden": ae.enc.sizes[1],
         "invert": invert, "train": cfg.to_dict()},
        metrics,
    )
    ckpt.arrays["dictionary.centroids"] = np.array(dictionary.centroids, dtype=np.float64)
    return clf, ckpt


def classifier_from_checkpoint(ckpt: ModelCheckpoint) -> RecalibratedClassifier:
    model = BiasedModel.from_checkpoint(ckpt)
    shape = model.shape
    ae = Autoencoder(shape.d_f, ckpt.config["latent_dim"], ckpt.config["ae_hidden"])
    ckpt.load_into("ae", ae)
    dictionary = ConfounderDictionary(ckpt.arrays["dictionary.centroids"].copy())
    return RecalibratedClassifier(model, ae, dictionary, invert=ckpt.config.get("invert", False))


# dictionary file: text header then K x latent_dim little-endian float64 values
#
#   CAUSAL-INFOMIN-DICT\n
#   format_version=1\n
#   K=<int>\n
#   latent_dim=<int>\n
#   iterations=<int>\n
#   end_header\n
#   <K * latent_dim * 8 bytes, row-major>

DICT_MAGIC = "CAUSAL-INFOMIN-DICT"
DICT_VERSION = 1


def dictionary_to_bytes(d: ConfounderDictionary) -> bytes:
    header = f"{DICT_MAGIC}\nformat_version={DICT_VERSION}\nK={d.K}\nlatent_dim={d.latent_dim}\niterations={d.iterations}\nend_header\n"
    return header.encode("ascii") + np.ascontiguousarray(d.centroids, dtype="<f8").tobytes()


def dictionary_from_bytes(data: bytes) -> ConfounderDictionary:
    from .errors import CorruptFileError, UnsupportedVersionError

    marker = b"end_header\n"
    end = data.find(marker)
    if not data.startswith(DICT_MAGIC.encode()) or end < 0:
        raise CorruptFileError("not a dictionary file or header truncated")
    meta = dict(line.split("=", 1) for line in data[:end].decode("ascii").strip().split("\n")[1:])
    if int(meta["format_version"]) != DICT_VERSION:
        raise UnsupportedVersionError(f"dictionary format version {meta['format_version']} not supported")
    K, dim = int(meta["K"]), int(meta["latent_dim"])
    body = data[end + len(marker):]
    if len(body) != K * dim * 8:
        raise CorruptFileError("dictionary body has the wrong length")
    return ConfounderDictionary(np.frombuffer(body, dtype="<f8").reshape(K, dim).astype(np.float64), int(meta["iterations"]))
