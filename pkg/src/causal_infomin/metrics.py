"""Audit metrics: accuracy, the sufficiency score lambda, the necessity test,
prediction entropy, confounder probes and paired bootstrap significance.

Models are passed as callables ``forward(q, v) -> logits`` on torch tensors;
``BiasedModel``, ``TeDModel`` and ``RecalibratedClassifier`` all qualify.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import netcore
from .baseline import split_logits
from .checkpoint import canonical_json, format_float
from .errors import DegenerateGroupError, InvalidInputError
from .netcore import Mlp, TrainConfig
from .synthbias import BiasSpec, Split, mask_to_spurious

LAMBDA_DENOM_FLOOR = 1e-12


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise InvalidInputError(f"length mismatch: {preds.shape} vs {labels.shape}")
    if preds.shape[0] == 0:
        raise InvalidInputError("accuracy of an empty list is undefined")
    return float((preds == labels).mean())


@dataclass(frozen=True)
class GroupSpec:
    group_id: int
    sample_indices: tuple[int, ...]

    def validate(self, split: Split) -> None:
        if not self.sample_indices:
            raise InvalidInputError(f"group {self.group_id} is empty")
        idx = np.asarray(self.sample_indices)
        if idx.min() < 0 or idx.max() >= len(split):
            raise InvalidInputError(f"group {self.group_id} has indices outside the split")


def groups_of(split: Split) -> list[GroupSpec]:
    """One GroupSpec per prefix value present in ``split``, in increasing id order."""
    return [GroupSpec(int(g), tuple(int(i) for i in np.flatnonzero(split.groups == g)))
            for g in np.unique(split.groups)]


def _probs(forward, split: Split) -> torch.Tensor:
    return torch.softmax(split_logits(forward, split), dim=-1)


def kl_from_uniform_rows(p, log=torch.log) -> torch.Tensor:
    """Row-wise KL(p_i || U) = sum_j p_ij log(k p_ij), with 0 log 0 = 0."""
    p = torch.as_tensor(p, dtype=torch.float64)
    k = p.shape[-1]
    safe = torch.where(p > 0, p * k, torch.ones_like(p))
    return (p * log(safe)).sum(-1)


def lambda_from_distributions(masked, full, log=torch.log) -> float:
    """Sum of KL-from-uniform over masked predictions divided by the same sum over full predictions."""
    num = float(kl_from_uniform_rows(masked, log).sum())
    den = float(kl_from_uniform_rows(full, log).sum())
    if den < LAMBDA_DENOM_FLOOR:
        raise DegenerateGroupError(f"model is uniformly uncertain on the full inputs (sum KL = {den:.3e})")
    return num / den


def sufficiency_lambda(forward, group: GroupSpec, split: Split, spec: BiasSpec) -> float:
    """Share of the model's certainty that survives masking everything but the prefix."""
    group.validate(split)
    members = split.subset(list(group.sample_indices))
    return lambda_from_distributions(_probs(forward, mask_to_spurious(members, spec)), _probs(forward, members))


def top_bias_groups(split: Split, count: int = 2) -> list[int]:
    """Prefix groups whose modal label is most frequent, highest share first (ties by id)."""
    shares = []
    for g in np.unique(split.groups):
        labels = split.labels[split.groups == g]
        shares.append((-np.bincount(labels).max() / len(labels), int(g)))
    return [g for _, g in sorted(shares)[:count]]


def necessity_delta(forward, id_split: Split, cf_split: Split) -> float:
    """accuracy(id) - accuracy(counterfactual) on elementwise-aligned splits."""
    if (len(id_split) != len(cf_split) or not np.array_equal(id_split.labels, cf_split.labels)
            or not np.array_equal(id_split.q, cf_split.q)):
        raise InvalidInputError("counterfactual split is not aligned with the id split")
    acc_id = netcore.accuracy_of(split_logits(forward, id_split), id_split.labels)
    acc_cf = netcore.accuracy_of(split_logits(forward, cf_split), cf_split.labels)
    return acc_id - acc_cf


def label_entropy(preds, num_classes: int) -> float:
    """Entropy (nats) of the empirical distribution of integer predictions."""
    preds = np.asarray(preds)
    if preds.size == 0:
        raise InvalidInputError("no predictions")
    counts = np.bincount(preds, minlength=num_classes).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def prediction_entropy(forward, split: Split) -> float:
    """Entropy of the aggregate distribution of argmax predictions over ``split``."""
    if len(split) == 0:
        raise InvalidInputError("empty split")
    logits = split_logits(forward, split)
    return label_entropy(logits.argmax(-1).numpy(), logits.shape[-1])


def modal_by_group(preds, groups, num_classes: int) -> dict[int, int]:
    """Most frequent prediction per group (smallest class id on ties)."""
    preds, groups = np.asarray(preds), np.asarray(groups)
    return {int(g): int(np.bincount(preds[groups == g], minlength=num_classes).argmax()) for g in np.unique(groups)}


@dataclass
class ProbeResult:
    accuracy: float
    entropy: float
    n_train: int
    n_eval: int


def probe_confounders(features, labels, cfg: TrainConfig | None = None, hidden: int = 32,
                      train_fraction: float = 0.7, num_classes: int | None = None) -> ProbeResult:
    """Train a one-hidden-layer probe on a seeded train partition and score the held-out rest.

    Returns held-out accuracy and the entropy of the probe's held-out argmax distribution.
    """
    x = torch.as_tensor(np.asarray(features, dtype=np.float64))
    y = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise InvalidInputError("features must be (n, d) with one label per row")
    if not 0 < train_fraction < 1:
        raise InvalidInputError("train_fraction must be in (0, 1)")
    cfg = cfg or TrainConfig(epochs=30)
    k = num_classes or int(y.max()) + 1
    g = torch.Generator().manual_seed(cfg.seed + 11)
    perm = torch.randperm(x.shape[0], generator=g)
    cut = int(round(train_fraction * x.shape[0]))
    if cut < 1 or cut >= x.shape[0]:
        raise InvalidInputError("too few samples to split into train and held-out parts")
    tr, ev = perm[:cut], perm[cut:]
    # standardize with train statistics so the probe's scale does not depend on the features'
    mu, sd = x[tr].mean(0), x[tr].std(0).clamp_min(1e-12)
    x = (x - mu) / sd
    probe = Mlp([x.shape[1], hidden, k], ["relu", "identity"], g)
    params = list(probe.parameters())
    opt = netcore.make_optimizer(params, cfg)
    xt, yt = x[tr], y[tr]
    for _ in range(cfg.epochs):
        batches = netcore.minibatch_indices(len(tr), cfg.batch_size, g)
        netcore.train_epoch(params, batches, lambda i: netcore.softmax_cross_entropy(probe(xt[i]), yt[i]), cfg, opt)
    with torch.no_grad():
        preds = probe(x[ev]).argmax(-1).numpy()
    return ProbeResult(accuracy(preds, y[ev].numpy()), label_entropy(preds, k), len(tr), len(ev))


def bootstrap_significance(correct_a, correct_b, resamples: int = 100_000, seed: int = 0) -> float:
    """Paired bootstrap p-value: fraction of resamples with mean(a) <= mean(b).

    For 0/1 vectors each paired difference is -1, 0 or +1, so a resample of n
    index draws is fully described by how many of each it picked, and those
    counts are multinomial(n, observed frequencies). Drawing the counts directly
    has the same distribution as drawing indices at O(resamples) cost.
    """
    a, b = np.asarray(correct_a), np.asarray(correct_b)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise InvalidInputError("empty correctness vectors")
    if resamples < 1000:
        raise InvalidInputError("resamples must be >= 1000")
    if not (np.isin(a, (0, 1)).all() and np.isin(b, (0, 1)).all()):
        raise InvalidInputError("correctness vectors must be 0/1")
    d = a.astype(np.int64) - b.astype(np.int64)
    n = d.size
    freqs = np.array([(d == 1).sum(), (d == 0).sum(), (d == -1).sum()], dtype=np.float64) / n
    counts = np.random.default_rng(seed).multinomial(n, freqs, size=resamples)
    return float(((counts[:, 0] - counts[:, 2]) <= 0).mean())


def correctness(forward, split: Split) -> np.ndarray:
    return (split_logits(forward, split).argmax(-1).numpy() == split.labels).astype(np.int64)


@dataclass
class MetricsReport:
    """Flat metric record for one model on one seed."""

    model: str
    seed: int
    accuracies: dict = field(default_factory=dict)
    lambdas: dict = field(default_factory=dict)
    group_sizes: dict = field(default_factory=dict)
    lambda_top: float = float("nan")
    necessity_delta: float = float("nan")
    entropies: dict = field(default_factory=dict)
    probe_accuracy: float = float("nan")
    p_values: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict)
    param_counts: dict = field(default_factory=dict)
    bias_capture: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = {str(k): v for k, v in self.lambdas.items()}
        d["group_sizes"] = {str(k): v for k, v in self.group_sizes.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["lambdas"] = {int(k): v for k, v in d.get("lambdas", {}).items()}
        d["group_sizes"] = {int(k): v for k, v in d.get("group_sizes", {}).items()}
        return cls(**d)

    def flat(self) -> dict[str, float]:
        """``section.key -> value`` view used by the text and aggregate outputs."""
        out = {"necessity_delta": self.necessity_delta, "probe_accuracy": self.probe_accuracy,
               "lambda_top": self.lambda_top}
        for section in ("accuracies", "entropies", "p_values", "runtime", "param_counts", "bias_capture"):
            for k, v in getattr(self, section).items():
                out[f"{section}.{k}"] = v
        for g, v in self.lambdas.items():
            out[f"lambda.{g}"] = v
        return dict(sorted(out.items()))

    def to_text(self) -> str:
        lines = [f"model={self.model}", f"seed={self.seed}"]
        for k, v in self.flat().items():
            lines.append(f"{k}={format_float(float(v))}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))


LAMBDA_CSV_COLUMNS = ("model", "seed", "group", "n", "lambda")


def lambda_csv(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LAMBDA_CSV_COLUMNS)
    for r in reports:
        for g in sorted(r.lambdas):
            w.writerow([r.model, r.seed, g, r.group_sizes.get(g, ""), format_float(r.lambdas[g])])
    return buf.getvalue()


def read_lambda_csv(text: str) -> dict[tuple[str, int, int], float]:
    rows = csv.DictReader(io.StringIO(text))
    return {(r["model"], int(r["seed"]), int(r["group"])): float(r["lambda"]) for r in rows}


def mean_std(values) -> tuple[float, float]:
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0
