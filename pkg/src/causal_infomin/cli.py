"""Command-line entry point: ``causal-infomin <subcommand> [--config PATH] [--seed N] [--out DIR] [--quiet]``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .errors import CheckpointError, ConfigError

log = logging.getLogger("causal_infomin")

SUBCOMMANDS = ("generate-data", "train-baseline", "run-ate-d", "run-te-d", "audit", "report", "run-all")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="causal-infomin", description="Confounder-based debiasing on a synthetic two-modality task.")
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("--config", help="YAML experiment config (defaults are used for omitted fields)")
    p.add_argument("--seed", type=int, help="run only this seed instead of the config's seed list")
    p.add_argument("--out", help="output directory (overrides the config and $%s)" % harness.OUT_ENV)
    p.add_argument("--quiet", action="store_true", help="only print warnings and errors")
    return p


def _per_seed(cfg, stage, label: str) -> int:
    failed = 0
    for seed in cfg.seeds:
        try:
            out = stage(cfg, seed)
        except (CheckpointError, FileNotFoundError) as exc:
            log.error("seed %d: %s failed: %s", seed, label, exc)
            failed += 1
            continue
        log.info("seed %d: %s done%s", seed, label, _brief(out))
    return 1 if failed == len(cfg.seeds) else 0


def _brief(out) -> str:
    if isinstance(out, dict) and out and all(hasattr(c, "metrics") for c in out.values()):
        return "".join(f"\n  {name}: ood={c.metrics['ood_test_acc']:.4f} id={c.metrics['id_test_acc']:.4f}"
                       for name, c in out.items())
    if hasattr(out, "metrics"):
        return f": ood={out.metrics['ood_test_acc']:.4f} id={out.metrics['id_test_acc']:.4f}"
    return ""


def _te_with_control(cfg, seed):
    control = harness.control_stage(cfg, seed)
    return {"ft_control": control, **harness.te_stage(cfg, seed)}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = harness.load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.out:
        cfg.output_dir = args.out
    cmd = args.command
    if cmd == "generate-data":
        return _per_seed(cfg, harness.generate_data, "generate-data")
    if cmd == "train-baseline":
        return _per_seed(cfg, harness.train_baseline_stage, "train-baseline")
    if cmd == "run-ate-d":
        return _per_seed(cfg, harness.ate_stage, "run-ate-d")
    if cmd == "run-te-d":
        return _per_seed(cfg, _te_with_control, "run-te-d")
    if cmd == "audit":
        return _per_seed(cfg, harness.audit_seed, "audit")
    if cmd == "report":
        report = harness.collect_report(cfg)
    else:
        report = harness.run_experiment(cfg)
    if not report.seeds:
        print("no seed produced results: " + "; ".join(f"{s}: {m}" for s, m in sorted(report.failures.items())),
              file=sys.stderr)
        return 1
    paths = harness.write_report(report)
    if not args.quiet:
        print(harness.summary_table(report), end="")
        print(f"report written to {paths[0].parent}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
