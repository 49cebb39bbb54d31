"""Experiment orchestration: config loading, per-seed pipelines, audit and reports.

Every stage reads and writes files under ``output_dir``::

    data/seed_<s>/<split>.split             generated dataset
    checkpoints/seed_<s>/<model>.ckpt        trained models
    checkpoints/seed_<s>/ate_d.dict          confounder dictionary
    losses/te_d_seed_<s>.csv                 TE-D loss components per epoch
    audit/seed_<s>.json                      metric reports for that seed
    report/                                  aggregate outputs (see write_report)
    timing.json                              wall-clock seconds per stage

All artifacts except ``timing.json`` are pure functions of the config and the
seed list, so reruns reproduce them byte for byte.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from . import ate_d, metrics, netcore, te_d
from .baseline import BiasedModel, ModelShape, as_tensors, evaluate_splits, extract_features, fit_classifier, train_biased
from .checkpoint import ModelCheckpoint, canonical_json, format_float, load_checkpoint, save_checkpoint
from .errors import ConfigError, InvalidInputError
from .metrics import MetricsReport
from .netcore import TrainConfig
from .synthbias import BiasSpec, DatasetBundle, conflict_indices, load_bundle, make_dataset, save_bundle

log = logging.getLogger(__name__)

OUT_ENV = "CAUSAL_INFOMIN_OUT"
METHODS = ("baseline", "ate_d", "te_d", "both")
REPORT_FORMAT_VERSION = 1

# config -------------------------------------------------------------------


@dataclass
class AteConfig:
    K: int = ate_d.DEFAULT_K
    latent_factor: int = ate_d.DEFAULT_FACTOR
    epochs: int = 5
    learning_rate: float = 1e-3
    ae_epochs: int = 5
    ae_batch_size: int = 256

    def validate(self) -> None:
        for name in ("K", "latent_factor", "epochs", "ae_epochs", "ae_batch_size"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be > 0")


@dataclass
class TeConfig:
    alpha: float = te_d.DEFAULT_ALPHA
    eps: float = te_d.DEFAULT_EPS
    factor: int = te_d.DEFAULT_FACTOR
    epochs: int = te_d.DEFAULT_EPOCHS
    learning_rate: float = 1e-3
    alpha_sweep: list = field(default_factory=lambda: [0.01, 0.1, 1.0])
    isolate_confounder: bool = False

    def validate(self) -> None:
        if self.alpha < 0:
            raise InvalidInputError("alpha must be >= 0")
        if not self.eps > 0:
            raise InvalidInputError("eps must be > 0")
        if self.factor < 1:
            raise InvalidInputError("factor must be >= 1")
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be > 0")
        if any(a < 0 for a in self.alpha_sweep):
            raise InvalidInputError("alpha_sweep entries must be >= 0")


@dataclass
class ModelConfig:
    hidden: int = 64
    fusion_hidden: int = 128
    m: int = 4
    d_f: int = 32
    activation: str = "relu"
    fused_activation: str = "relu"

    def validate(self) -> None:
        for name in ("hidden", "fusion_hidden", "m", "d_f"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        for name in ("activation", "fused_activation"):
            if getattr(self, name) not in netcore.ACTIVATIONS:
                raise InvalidInputError(f"{name} must be one of {netcore.ACTIVATIONS}")


@dataclass
class AuditConfig:
    bootstrap_resamples: int = 100_000
    probe_epochs: int = 30
    probe_hidden: int = 32
    top_groups: int = 2

    def validate(self) -> None:
        if self.bootstrap_resamples < 1000:
            raise InvalidInputError("bootstrap_resamples must be >= 1000")
        for name in ("probe_epochs", "probe_hidden", "top_groups"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")


@dataclass
class ExperimentConfig:
    bias_spec: BiasSpec = field(default_factory=BiasSpec)
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    method: str = "both"
    ate: AteConfig = field(default_factory=AteConfig)
    te: TeConfig = field(default_factory=TeConfig)
    audit: AuditConfig = field(default_factory=AuditConfig)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "runs/default"

    def shape(self) -> ModelShape:
        return ModelShape.for_spec(self.bias_spec, **dataclasses.asdict(self.model))

    def spec_for(self, seed: int) -> BiasSpec:
        return dataclasses.replace(self.bias_spec, seed=seed)

    def train_for(self, seed: int) -> TrainConfig:
        return dataclasses.replace(self.train_cfg, seed=seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)


_SECTIONS = {"bias_spec": BiasSpec, "train_cfg": TrainConfig, "model": ModelConfig, "ate": AteConfig,
             "te": TeConfig, "audit": AuditConfig}


def _coerce(value, default, path: str):
    """Match the type of the default; ints are accepted where floats are expected."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", path)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {value!r}", path)
        return list(value)
    return value


def _build_section(cls, raw, path: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("expected a mapping", path)
    defaults = cls()
    names = {f.name for f in fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError("unknown field", f"{path}.{key}")
    kwargs = {name: _coerce(raw[name], getattr(defaults, name), f"{path}.{name}") for name in raw}
    for i, a in enumerate(kwargs.get("alpha_sweep", ())):
        if isinstance(a, bool) or not isinstance(a, (int, float)):
            raise ConfigError(f"expected a number, got {a!r}", f"{path}.alpha_sweep[{i}]")
    try:
        obj = cls(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
    except InvalidInputError as exc:
        raise ConfigError(str(exc), f"{path}.{_blame(str(exc), names)}") from exc
    return obj


def _blame(message: str, names) -> str:
    """Field named at the start of a validation message (validators lead with the field name)."""
    head = message.split("=")[0].split(" ")[0]
    return head if head in names else "?"


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping", "<root>")
    names = {f.name for f in fields(ExperimentConfig)}
    for key in raw:
        if key not in names:
            raise ConfigError("unknown field", key)
    defaults = ExperimentConfig()
    kwargs = {name: _build_section(cls, raw.get(name), name) for name, cls in _SECTIONS.items()}
    for name in ("method", "seeds", "output_dir"):
        kwargs[name] = _coerce(raw.get(name, getattr(defaults, name)), getattr(defaults, name), name)
    if kwargs["method"] not in METHODS:
        raise ConfigError(f"must be one of {METHODS}", "method")
    seeds = kwargs["seeds"]
    if not seeds:
        raise ConfigError("at least one seed is required", "seeds")
    for i, s in enumerate(seeds):
        if isinstance(s, bool) or not isinstance(s, int) or s < 0:
            raise ConfigError(f"expected a non-negative integer, got {s!r}", f"seeds[{i}]")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("duplicate seeds", "seeds")
    cfg = ExperimentConfig(**kwargs)
    if cfg.model.d_f % cfg.te.factor:
        raise ConfigError(f"d_f={cfg.model.d_f} is not divisible by the bottleneck factor", "te.factor")
    return cfg


def load_config(path=None, text: str | None = None) -> ExperimentConfig:
    """Parse a YAML config (from ``path`` or ``text``); ``CAUSAL_INFOMIN_OUT`` overrides output_dir."""
    if text is None:
        if path is None:
            text = ""
        else:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}", str(path)) from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"YAML parse error: {exc}", str(path or "<text>")) from exc
    cfg = config_from_dict(raw or {})
    if os.environ.get(OUT_ENV):
        cfg.output_dir = os.environ[OUT_ENV]
    return cfg


# layout -------------------------------------------------------------------


class Layout:
    def __init__(self, root):
        self.root = Path(root)

    def data(self, seed: int) -> Path:
        return self.root / "data" / f"seed_{seed}"

    def ckpt(self, seed: int, name: str) -> Path:
        return self.root / "checkpoints" / f"seed_{seed}" / f"{name}.ckpt"

    def dictionary(self, seed: int) -> Path:
        return self.root / "checkpoints" / f"seed_{seed}" / "ate_d.dict"

    def loss_csv(self, seed: int) -> Path:
        return self.root / "losses" / f"te_d_seed_{seed}.csv"

    def audit(self, seed: int) -> Path:
        return self.root / "audit" / f"seed_{seed}.json"

    @property
    def report(self) -> Path:
        return self.root / "report"

    @property
    def timing(self) -> Path:
        return self.root / "timing.json"


class Timer:
    """Wall-clock seconds per (seed, stage); kept apart from the deterministic artifacts."""

    def __init__(self, layout: Layout):
        self.layout = layout
        self.records: dict[str, float] = {}

    def run(self, seed: int, stage: str, fn, *args):
        t0 = time.perf_counter()
        out = fn(*args)
        self.records[f"seed_{seed}.{stage}"] = time.perf_counter() - t0
        return out

    def flush(self) -> None:
        path = self.layout.timing
        old = json.loads(path.read_text()) if path.exists() else {}
        old.update(self.records)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(old, indent=1, sort_keys=True) + "\n")


# stages -------------------------------------------------------------------


def generate_data(cfg: ExperimentConfig, seed: int) -> DatasetBundle:
    bundle = make_dataset(cfg.spec_for(seed))
    save_bundle(bundle, Layout(cfg.output_dir).data(seed))
    return bundle


def ensure_data(cfg: ExperimentConfig, seed: int) -> DatasetBundle:
    d = Layout(cfg.output_dir).data(seed)
    if (d / "train.split").exists():
        bundle = load_bundle(d)
        if bundle.spec == cfg.spec_for(seed):
            return bundle
        log.warning("dataset in %s was made with a different spec; regenerating", d)
    return generate_data(cfg, seed)


def train_baseline_stage(cfg: ExperimentConfig, seed: int) -> ModelCheckpoint:
    bundle = ensure_data(cfg, seed)
    ckpt = train_biased(bundle, cfg.train_for(seed), cfg.shape())
    save_checkpoint(ckpt, Layout(cfg.output_dir).ckpt(seed, "baseline"))
    return ckpt


def ensure_baseline(cfg: ExperimentConfig, seed: int) -> ModelCheckpoint:
    path = Layout(cfg.output_dir).ckpt(seed, "baseline")
    if path.exists():
        return load_checkpoint(path)
    return train_baseline_stage(cfg, seed)


def _finetune_cfg(cfg: ExperimentConfig, seed: int, lr: float, epochs: int) -> TrainConfig:
    return dataclasses.replace(cfg.train_cfg, seed=seed, learning_rate=lr, epochs=epochs)


def control_stage(cfg: ExperimentConfig, seed: int) -> ModelCheckpoint:
    """Plain cross-entropy fine-tuning of the baseline with TE-D's budget (a same-cost control)."""
    bundle, base = ensure_data(cfg, seed), ensure_baseline(cfg, seed)
    model = BiasedModel.from_checkpoint(base)
    ft = _finetune_cfg(cfg, seed, cfg.te.learning_rate, cfg.te.epochs)
    fit_classifier(model, model.parameters(), bundle.train, ft, generator=torch.Generator().manual_seed(seed + 3))
    metrics_ = evaluate_splits(model, bundle)
    metrics_["trainable_params"] = netcore.count_params(model)
    ckpt = model.to_checkpoint("ft_control", {"train": ft.to_dict()}, metrics_)
    save_checkpoint(ckpt, Layout(cfg.output_dir).ckpt(seed, "ft_control"))
    return ckpt


def ate_stage(cfg: ExperimentConfig, seed: int) -> dict[str, ModelCheckpoint]:
    bundle, base = ensure_data(cfg, seed), ensure_baseline(cfg, seed)
    layout = Layout(cfg.output_dir)
    model = BiasedModel.from_checkpoint(base)
    feats = extract_features(model, bundle.train).reshape(-1, model.shape.d_f)
    ae_cfg = TrainConfig(learning_rate=cfg.ate.learning_rate, epochs=cfg.ate.ae_epochs,
                         batch_size=cfg.ate.ae_batch_size, seed=seed,
                         weight_decay=cfg.train_cfg.weight_decay, grad_clip_norm=cfg.train_cfg.grad_clip_norm)
    aer = ate_d.train_autoencoder(feats, ae_cfg, factor=cfg.ate.latent_factor)
    dictionary = ate_d.build_dictionary(aer.ae, feats, cfg.ate.K, seed=seed)
    layout.dictionary(seed).parent.mkdir(parents=True, exist_ok=True)
    layout.dictionary(seed).write_bytes(ate_d.dictionary_to_bytes(dictionary))
    ft = _finetune_cfg(cfg, seed, cfg.ate.learning_rate, cfg.ate.epochs)
    out = {}
    for invert in (False, True):
        _, ckpt = ate_d.finetune_recalibrated(model, aer.ae, dictionary, bundle, ft, invert=invert)
        ckpt.metrics["ae_initial_loss"] = aer.initial_loss
        ckpt.metrics["ae_final_loss"] = aer.final_loss
        save_checkpoint(ckpt, layout.ckpt(seed, ckpt.kind))
        out[ckpt.kind] = ckpt
    return out


def te_stage(cfg: ExperimentConfig, seed: int) -> dict[str, ModelCheckpoint]:
    bundle, base = ensure_data(cfg, seed), ensure_baseline(cfg, seed)
    layout = Layout(cfg.output_dir)
    ft = _finetune_cfg(cfg, seed, cfg.te.learning_rate, cfg.te.epochs)
    t = cfg.te
    res = te_d.train_te_d(base, bundle, ft, t.alpha, t.eps, t.factor, t.epochs, t.isolate_confounder)
    zc_rate, zt_rate = te_d.batch_rates(res.model, bundle.train)
    res.checkpoint.metrics.update({"rate_z_c": zc_rate, "rate_z_theta": zt_rate})
    for alpha in t.alpha_sweep:
        if float(alpha) == float(t.alpha):
            continue
        swept = te_d.train_te_d(base, bundle, ft, float(alpha), t.eps, t.factor, t.epochs, t.isolate_confounder)
        for split in ("id_test", "ood_test"):
            res.checkpoint.metrics[f"sweep_alpha_{format_float(float(alpha))}_{split}_acc"] = \
                swept.checkpoint.metrics[f"{split}_acc"]
    save_checkpoint(res.checkpoint, layout.ckpt(seed, "te_d"))
    te_d.write_loss_csv(res.loss_log, layout.loss_csv(seed))
    return {"te_d": res.checkpoint}


# audit --------------------------------------------------------------------

MODEL_ORDER = ("baseline", "ft_control", "ate_d", "ate_d_inverted", "te_d")


def model_from_checkpoint(ckpt: ModelCheckpoint):
    if ckpt.kind in ("baseline", "ft_control"):
        return BiasedModel.from_checkpoint(ckpt)
    if ckpt.kind in ("ate_d", "ate_d_inverted"):
        return ate_d.classifier_from_checkpoint(ckpt)
    if ckpt.kind == "te_d":
        return te_d.TeDModel.from_checkpoint(ckpt)
    raise InvalidInputError(f"unknown checkpoint kind {ckpt.kind!r}")


def models_for(method: str) -> tuple[str, ...]:
    chosen = {"baseline": (), "ate_d": ("ate_d", "ate_d_inverted"), "te_d": ("ft_control", "te_d"),
              "both": ("ft_control", "ate_d", "ate_d_inverted", "te_d")}[method]
    return ("baseline",) + tuple(m for m in MODEL_ORDER if m in chosen)


def _ate_codes(clf: ate_d.RecalibratedClassifier, split) -> np.ndarray:
    q, v, _ = as_tensors(split)
    with torch.no_grad():
        return clf.ae.enc(clf.model.fused(q, v)).mean(1).numpy()


def _te_bottleneck(model: te_d.TeDModel, split) -> np.ndarray:
    q, v, _ = as_tensors(split)
    with torch.no_grad():
        z = model.z_theta(q, v)
        (w, b), = model.conf_enc.layers()[:1]
        return torch.tanh(z @ w.T + b).numpy()


def _steps(n: int, batch: int, epochs: int) -> int:
    return epochs * -(-n // batch)


def audit_seed(cfg: ExperimentConfig, seed: int) -> dict:
    """Full metric suite on every trained model of one seed; writes audit/seed_<s>.json."""
    layout = Layout(cfg.output_dir)
    bundle = ensure_data(cfg, seed)
    spec = bundle.spec
    k = spec.num_classes
    ckpts = {name: load_checkpoint(layout.ckpt(seed, name)) for name in models_for(cfg.method)}
    models = {name: model_from_checkpoint(c) for name, c in ckpts.items()}
    ood, idt = bundle.ood_test, bundle.id_test
    conflict = ood.subset(conflict_indices(ood))
    groups = metrics.groups_of(idt)
    top = metrics.top_bias_groups(bundle.train, cfg.audit.top_groups)
    train_modes = metrics.modal_by_group(bundle.train.labels, bundle.train.groups, k)
    base_correct = metrics.correctness(models["baseline"], ood)
    base_params = netcore.count_params(models["baseline"])
    n_train = len(bundle.train)
    probe_cfg = TrainConfig(epochs=cfg.audit.probe_epochs, seed=seed)
    reports, correct, modal = [], {}, {"train": train_modes}
    for name, model in models.items():
        c = ckpts[name]
        r = MetricsReport(model=name, seed=seed)
        r.accuracies = {f"{s}": netcore.accuracy_of(_logits(model, sp), sp.labels)
                        for s, sp in bundle.splits().items()}
        r.accuracies["ood_conflict"] = netcore.accuracy_of(_logits(model, conflict), conflict.labels) if len(conflict) else float("nan")
        r.accuracies.update({key: val for key, val in c.metrics.items() if key.startswith("sweep_alpha_")})
        r.lambdas = {g.group_id: metrics.sufficiency_lambda(model, g, idt, spec) for g in groups}
        r.group_sizes = {g.group_id: len(g.sample_indices) for g in groups}
        r.lambda_top = float(np.mean([r.lambdas[g] for g in top]))
        r.necessity_delta = metrics.necessity_delta(model, idt, bundle.cf_test)
        preds = _logits(model, ood).argmax(-1).numpy()
        r.entropies = {"prediction_ood": metrics.label_entropy(preds, k)}
        modal[name] = metrics.modal_by_group(preds, ood.groups, k)
        r.bias_capture = {"modal_match": _match(modal[name], train_modes)}
        correct[name] = (preds == ood.labels).astype(np.int64)
        if name != "baseline":
            r.p_values = {"ood_vs_baseline": metrics.bootstrap_significance(
                correct[name], base_correct, cfg.audit.bootstrap_resamples, seed=seed)}
        if name == "te_d":
            # main_head supersedes the copied baseline head, so only the confounder branch is new
            added = int(c.metrics["added_params"])
            total = base_params + added
        else:
            total = netcore.count_params(model)
            added = total - base_params
        r.param_counts = {"total": total, "trainable": int(c.metrics.get("trainable_params", total)), "added": added}
        r.runtime = _work(cfg, name, n_train)
        if name == "ate_d":
            pr = metrics.probe_confounders(_ate_codes(model, ood), ood.labels, probe_cfg, cfg.audit.probe_hidden, num_classes=k)
            r.probe_accuracy = pr.accuracy
            r.entropies["probe_ood"] = pr.entropy
        if name == "te_d":
            conf_preds = _conf_logits(model, ood).argmax(-1).numpy()
            modal["conf_head"] = metrics.modal_by_group(conf_preds, ood.groups, k)
            r.entropies["conf_head_ood"] = metrics.label_entropy(conf_preds, k)
            r.accuracies["conf_head_ood_test"] = float((conf_preds == ood.labels).mean())
            r.bias_capture["conf_modal_match"] = _match(modal["conf_head"], train_modes)
            r.bias_capture["rate_z_c"] = c.metrics["rate_z_c"]
            r.bias_capture["rate_z_theta"] = c.metrics["rate_z_theta"]
            pr = metrics.probe_confounders(_te_bottleneck(model, ood), ood.labels, probe_cfg, cfg.audit.probe_hidden, num_classes=k)
            r.probe_accuracy = pr.accuracy
            r.entropies["probe_ood"] = pr.entropy
        reports.append(r)
    result = {
        "seed": seed,
        "top_groups": top,
        "reports": [r.to_dict() for r in reports],
        "modal_by_group": {name: {str(g): m for g, m in table.items()} for name, table in modal.items()},
        "ood_correct": {name: "".join(map(str, v.tolist())) for name, v in correct.items()},
    }
    path = layout.audit(seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(result) + "\n")
    return result


def _logits(model, split) -> torch.Tensor:
    from .baseline import split_logits

    return split_logits(model, split)


@torch.no_grad()
def _conf_logits(model: te_d.TeDModel, split) -> torch.Tensor:
    q, v, _ = as_tensors(split)
    return model.conf_logits(q, v)


def _match(modes: dict, reference: dict) -> float:
    return float(np.mean([modes[g] == reference.get(g) for g in modes]))


def _work(cfg: ExperimentConfig, name: str, n_train: int) -> dict:
    """Deterministic cost counters; wall-clock time lives in timing.json."""
    base = {"epochs": cfg.train_cfg.epochs,
            "optimizer_steps": _steps(n_train, cfg.train_cfg.batch_size, cfg.train_cfg.epochs)}
    if name == "baseline":
        return base
    if name in ("ft_control", "te_d"):
        ep = cfg.te.epochs
    else:
        ep = cfg.ate.epochs
    return {"epochs": ep, "optimizer_steps": _steps(n_train, cfg.train_cfg.batch_size, ep)}


# pipeline -----------------------------------------------------------------


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    seeds: list = field(default_factory=list)  # per-seed audit dicts
    failures: dict = field(default_factory=dict)  # seed -> error message

    def reports(self) -> list[MetricsReport]:
        return [MetricsReport.from_dict(r) for s in self.seeds for r in s["reports"]]

    def models(self) -> list[str]:
        seen = []
        for r in self.reports():
            if r.model not in seen:
                seen.append(r.model)
        return seen

    def aggregate(self) -> dict:
        """Per model: mean and sample std of every flat metric across seeds, plus pooled p-values."""
        out = {}
        reps = self.reports()
        for name in self.models():
            mine = [r for r in reps if r.model == name]
            keys = sorted({k for r in mine for k in r.flat()})
            out[name] = {}
            for key in keys:
                mean, std = metrics.mean_std([r.flat().get(key, float("nan")) for r in mine])
                out[name][key] = {"mean": mean, "std": std, "n": len(mine)}
            if name != "baseline":
                a = np.concatenate([_bits(s["ood_correct"][name]) for s in self.seeds])
                b = np.concatenate([_bits(s["ood_correct"]["baseline"]) for s in self.seeds])
                p = metrics.bootstrap_significance(a, b, self.config.audit.bootstrap_resamples, seed=0)
                out[name]["p_values.pooled_ood_vs_baseline"] = {"mean": p, "std": 0.0, "n": len(mine)}
        return out


def _bits(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("ascii"), dtype=np.uint8) - ord("0")


def run_seed(cfg: ExperimentConfig, seed: int, timer: Timer | None = None) -> dict:
    timer = timer or Timer(Layout(cfg.output_dir))
    timer.run(seed, "generate_data", generate_data, cfg, seed)
    timer.run(seed, "train_baseline", train_baseline_stage, cfg, seed)
    if cfg.method in ("ate_d", "both"):
        timer.run(seed, "ate_d", ate_stage, cfg, seed)
    if cfg.method in ("te_d", "both"):
        timer.run(seed, "ft_control", control_stage, cfg, seed)
        timer.run(seed, "te_d", te_stage, cfg, seed)
    return timer.run(seed, "audit", audit_seed, cfg, seed)


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Every seed end to end; a failing seed is recorded and the rest still run."""
    torch.use_deterministic_algorithms(True)
    timer = Timer(Layout(cfg.output_dir))
    report = ExperimentReport(cfg)
    for seed in cfg.seeds:
        try:
            report.seeds.append(run_seed(cfg, seed, timer))
        except Exception as exc:  # recorded per seed by contract
            log.exception("seed %d failed", seed)
            report.failures[seed] = f"{type(exc).__name__}: {exc}"
    timer.flush()
    return report


def collect_report(cfg: ExperimentConfig) -> ExperimentReport:
    """Rebuild a report from existing audit files (seeds without one count as failures)."""
    report = ExperimentReport(cfg)
    for seed in cfg.seeds:
        path = Layout(cfg.output_dir).audit(seed)
        if path.exists():
            report.seeds.append(json.loads(path.read_text()))
        else:
            report.failures[seed] = f"no audit file at {path}"
    return report


# report files -------------------------------------------------------------

SUMMARY_SPLITS = ("train", "id_test", "ood_test", "cf_test", "ood_conflict")


def summary_table(report: ExperimentReport) -> str:
    agg = report.aggregate()
    n = len(report.seeds)
    lines = [f"seeds: {[s['seed'] for s in report.seeds]}  failures: {sorted(report.failures)}",
             "", f"{'split':<14}{'model':<16}{'accuracy (mean +- std over ' + str(n) + ' seeds)'}"]
    for split in SUMMARY_SPLITS:
        for name in report.models():
            cell = agg[name].get(f"accuracies.{split}")
            if cell:
                lines.append(f"{split:<14}{name:<16}{cell['mean']:.4f} +- {cell['std']:.4f}")
    lines += ["", f"{'metric':<34}" + "".join(f"{m:>16}" for m in report.models())]
    for key in ("lambda_top", "necessity_delta", "entropies.prediction_ood", "bias_capture.modal_match",
                "p_values.pooled_ood_vs_baseline", "param_counts.total", "param_counts.trainable",
                "param_counts.added"):
        row = f"{key:<34}"
        for name in report.models():
            cell = agg[name].get(key)
            row += f"{cell['mean']:>16.4f}" if cell else f"{'-':>16}"
        lines.append(row)
    if "te_d" in agg:
        lines.append("")
        for key in sorted(k for k in agg["te_d"] if k.startswith(("bias_capture.", "entropies.", "accuracies.sweep",
                                                                     "accuracies.conf"))):
            lines.append(f"te_d {key:<44}{agg['te_d'][key]['mean']:.4f}")
    for seed, msg in sorted(report.failures.items()):
        lines.append(f"seed {seed} failed: {msg}")
    return "\n".join(lines) + "\n"


def modal_table_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    sources = ["train", "conf_head"] + [m for m in report.models()]
    w.writerow(["seed", "group"] + [f"{s}_mode" for s in sources])
    for s in report.seeds:
        table = s["modal_by_group"]
        for g in sorted(table["train"], key=int):
            w.writerow([s["seed"], g] + [table.get(src, {}).get(g, "") for src in sources])
    return buf.getvalue()


def write_report(report: ExperimentReport, directory=None) -> list[Path]:
    """summary.txt, results.json, lambda.csv, modal_by_group.csv and a copy of each TE-D loss CSV."""
    d = Path(directory) if directory is not None else Layout(report.config.output_dir).report
    written = []

    def put(name: str, text: str) -> None:
        path = d / name
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text)
        except OSError as exc:
            raise OSError(f"{path}: {exc}") from exc
        written.append(path)

    put("summary.txt", summary_table(report))
    # output_dir is where the run lives, not what it computed; leaving it out keeps reports relocatable
    config = {k: v for k, v in report.config.to_dict().items() if k != "output_dir"}
    results = {"format_version": REPORT_FORMAT_VERSION, "config": config,
               "aggregate": report.aggregate(), "per_seed": [s["reports"] for s in report.seeds],
               "failures": {str(k): v for k, v in report.failures.items()}}
    put("results.json", canonical_json(results) + "\n")
    put("lambda.csv", metrics.lambda_csv(report.reports()))
    put("modal_by_group.csv", modal_table_csv(report))
    layout = Layout(report.config.output_dir)
    for s in report.seeds:
        src = layout.loss_csv(s["seed"])
        if src.exists():
            put(f"losses/{src.name}", src.read_text())
    return written
