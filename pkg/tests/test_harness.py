"""Config loading, the end-to-end pipeline on a tiny setup, report files and the CLI."""

import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from absl.testing import parameterized

from causal_infomin import cli, harness, metrics
from causal_infomin.checkpoint import load_checkpoint
from causal_infomin.errors import ConfigError
from causal_infomin.harness import ExperimentConfig, Layout
from causal_infomin.synthbias import BiasSpec

TINY = """
bias_spec: {n_train: 400, n_test: 200, block_dim: 8, num_classes: 4}
model: {hidden: 16, fusion_hidden: 32, d_f: 8}
train_cfg: {epochs: 2}
te: {epochs: 1, alpha_sweep: [0.01, 0.1]}
ate: {epochs: 1, ae_epochs: 1, K: 3}
audit: {bootstrap_resamples: 1000, probe_epochs: 2}
seeds: [0, 1]
"""


def tiny(out, **over):
  cfg = harness.load_config(text=TINY)
  cfg.output_dir = str(out)
  for k, v in over.items():
    setattr(cfg, k, v)
  return cfg


def artifact_bytes(root):
  """Every output file except the wall-clock log, keyed by relative path."""
  root = Path(root)
  return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
          if p.is_file() and p.name != "timing.json"}


class ConfigTest(parameterized.TestCase):

  def testEmptyConfigGivesDefaults(self):
    with pytest.MonkeyPatch.context() as mp:
      mp.delenv(harness.OUT_ENV, raising=False)
      self.assertEqual(harness.load_config(text=""), ExperimentConfig())
      self.assertEqual(harness.load_config(text="seeds: [7]").bias_spec, BiasSpec())

  def testDefaultsMatchDocumentedValues(self):
    cfg = ExperimentConfig()
    self.assertEqual((cfg.ate.K, cfg.ate.latent_factor, cfg.te.factor), (10, 4, 4))
    self.assertEqual((cfg.te.alpha, cfg.te.eps, cfg.te.epochs), (0.1, 0.5, 5))
    self.assertEqual(cfg.te.alpha_sweep, [0.01, 0.1, 1.0])
    self.assertEqual((cfg.train_cfg.learning_rate, cfg.train_cfg.batch_size, cfg.train_cfg.epochs), (1e-3, 64, 30))
    self.assertEqual((cfg.train_cfg.weight_decay, cfg.train_cfg.grad_clip_norm), (0.01, 1.0))
    self.assertEqual(cfg.seeds, [0, 1, 2, 3, 4])

  @parameterized.named_parameters(
      ("rho", "bias_spec: {rho_q: 1.5}", "bias_spec.rho_q"),
      ("unknown_top", "colour: red", "colour"),
      ("unknown_nested", "te: {beta: 1}", "te.beta"),
      ("type", "train_cfg: {epochs: 2.5}", "train_cfg.epochs"),
      ("bool_as_int", "train_cfg: {epochs: true}", "train_cfg.epochs"),
      ("epochs", "train_cfg: {epochs: 0}", "train_cfg.epochs"),
      ("method", "method: all", "method"),
      ("no_seeds", "seeds: []", "seeds"),
      ("dup_seeds", "seeds: [1, 1]", "seeds"),
      ("neg_seed", "seeds: [0, -2]", "seeds[1]"),
      ("factor", "te: {factor: 5}", "te.factor"),
      ("sweep", "te: {alpha_sweep: [0.1, x]}", "te.alpha_sweep[1]"),
      ("activation", "model: {activation: gelu}", "model.activation"),
      ("section_type", "ate: 3", "ate"),
      ("resamples", "audit: {bootstrap_resamples: 10}", "audit.bootstrap_resamples"))
  def testValidationNamesField(self, text, path):
    with self.assertRaises(ConfigError) as ctx:
      harness.load_config(text=text)
    self.assertEqual(ctx.exception.path, path)

  def testYamlErrorAndMissingFile(self):
    with self.assertRaises(ConfigError):
      harness.load_config(text="seeds: [1, 2")
    with self.assertRaises(ConfigError):
      harness.load_config("/nonexistent/config.yaml")

  def testRoundTrip(self):
    cfg = harness.load_config(text=TINY)
    again = harness.load_config(text=cfg.to_yaml())
    self.assertEqual(again, cfg)
    self.assertEqual(again.to_yaml(), cfg.to_yaml())

  def testFromFileAndEnvOverride(self):
    path = self.create_tempfile(content=TINY).full_path
    with pytest.MonkeyPatch.context() as mp:
      mp.setenv(harness.OUT_ENV, "/tmp/elsewhere")
      self.assertEqual(harness.load_config(path).output_dir, "/tmp/elsewhere")
      mp.delenv(harness.OUT_ENV)
      self.assertEqual(harness.load_config(path).output_dir, "runs/default")

  def testIntAcceptedForFloat(self):
    self.assertEqual(harness.load_config(text="te: {alpha: 1}").te.alpha, 1.0)

  def testModelsForMethod(self):
    self.assertEqual(harness.models_for("baseline"), ("baseline",))
    self.assertEqual(harness.models_for("ate_d"), ("baseline", "ate_d", "ate_d_inverted"))
    self.assertEqual(harness.models_for("both"), harness.MODEL_ORDER)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
  out = tmp_path_factory.mktemp("tiny")
  cfg = tiny(out)
  report = harness.run_experiment(cfg)
  harness.write_report(report)
  return cfg, report


def test_report_is_complete(tiny_run):
  cfg, report = tiny_run
  assert not report.failures
  assert [s["seed"] for s in report.seeds] == [0, 1]
  reps = report.reports()
  assert len(reps) == len(harness.MODEL_ORDER) * 2
  for r in reps:
    assert set(r.accuracies) >= {"train", "id_test", "ood_test", "cf_test", "ood_conflict"}
    assert set(r.lambdas) == set(r.group_sizes) and r.lambdas
    assert np.isfinite(r.lambda_top) and np.isfinite(r.necessity_delta)
    assert "prediction_ood" in r.entropies and "modal_match" in r.bias_capture
    assert set(r.param_counts) == {"total", "trainable", "added"}
    assert set(r.runtime) == {"epochs", "optimizer_steps"}
    assert (r.model == "baseline") == (not r.p_values)
  te = [r for r in reps if r.model == "te_d"]
  for r in te:
    assert {"conf_head_ood", "probe_ood"} <= set(r.entropies)
    assert any(k.startswith("sweep_alpha_0.01") for k in r.accuracies)
    assert not any(k.startswith("sweep_alpha_0.1") for k in r.accuracies)  # the main alpha is not re-run
    assert np.isfinite(r.probe_accuracy)


def test_report_files(tiny_run):
  cfg, report = tiny_run
  d = Layout(cfg.output_dir).report
  summary = (d / "summary.txt").read_text()
  for split in harness.SUMMARY_SPLITS:
    rows = [line for line in summary.splitlines() if line.startswith(f"{split} ")]
    assert [line.split()[1] for line in rows] == list(harness.MODEL_ORDER)
  results = json.loads((d / "results.json").read_text())
  assert results["format_version"] == harness.REPORT_FORMAT_VERSION
  assert "output_dir" not in results["config"]
  assert set(results["aggregate"]) == set(harness.MODEL_ORDER)
  assert results["aggregate"]["te_d"]["accuracies.ood_test"]["n"] == 2
  assert sorted(p.name for p in (d / "losses").iterdir()) == ["te_d_seed_0.csv", "te_d_seed_1.csv"]
  modal = list(csv.reader(io.StringIO((d / "modal_by_group.csv").read_text())))
  assert modal[0][:4] == ["seed", "group", "train_mode", "conf_head_mode"]


def test_lambda_csv_matches_report(tiny_run):
  cfg, report = tiny_run
  table = metrics.read_lambda_csv((Layout(cfg.output_dir).report / "lambda.csv").read_text())
  expected = {(r.model, r.seed, g): v for r in report.reports() for g, v in r.lambdas.items()}
  assert table.keys() == expected.keys()
  for key, v in expected.items():
    assert abs(table[key] - v) <= 1e-12


def test_collect_report_rebuilds_same_files(tiny_run, tmp_path):
  cfg, report = tiny_run
  rebuilt = harness.collect_report(cfg)
  harness.write_report(rebuilt, tmp_path)
  for name in ("summary.txt", "results.json", "lambda.csv", "modal_by_group.csv"):
    assert (tmp_path / name).read_bytes() == (Layout(cfg.output_dir).report / name).read_bytes()


def test_rerun_is_byte_identical(tiny_run, tmp_path):
  cfg, _ = tiny_run
  again = tiny(tmp_path / "again")
  harness.write_report(harness.run_experiment(again))
  assert artifact_bytes(cfg.output_dir) == artifact_bytes(again.output_dir)
  assert (Path(again.output_dir) / "timing.json").exists()


def test_staged_cli_matches_run_all(tiny_run, tmp_path):
  cfg, _ = tiny_run
  conf = tmp_path / "tiny.yaml"
  conf.write_text(TINY)
  out = tmp_path / "staged"
  for cmd in ("generate-data", "train-baseline", "run-ate-d", "run-te-d", "audit", "report"):
    assert cli.main([cmd, "--config", str(conf), "--out", str(out), "--quiet"]) == 0
  staged, full = artifact_bytes(out), artifact_bytes(cfg.output_dir)
  assert staged.keys() == full.keys()
  for key in staged:
    assert staged[key] == full[key], key


def test_checkpoint_metrics_reproduce_from_disk(tiny_run):
  cfg, report = tiny_run
  layout = Layout(cfg.output_dir)
  bundle = harness.ensure_data(cfg, 0)
  for name in harness.MODEL_ORDER:
    ckpt = load_checkpoint(layout.ckpt(0, name))
    model = harness.model_from_checkpoint(ckpt)
    from causal_infomin.baseline import split_accuracy
    assert split_accuracy(model, bundle.ood_test) == ckpt.metrics["ood_test_acc"]


def test_failed_seed_is_recorded_and_others_continue(tmp_path, monkeypatch):
  cfg = tiny(tmp_path, seeds=[0, 5], method="baseline")
  real = harness.train_baseline_stage

  def flaky(c, seed):
    if seed == 5:
      raise RuntimeError("boom")
    return real(c, seed)

  monkeypatch.setattr(harness, "train_baseline_stage", flaky)
  report = harness.run_experiment(cfg)
  assert [s["seed"] for s in report.seeds] == [0]
  assert report.failures == {5: "RuntimeError: boom"}
  assert "seed 5 failed: RuntimeError: boom" in harness.summary_table(report)


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
  bad = tmp_path / "bad.yaml"
  bad.write_text("bias_spec: {rho_q: 1.5}")
  assert cli.main(["run-all", "--config", str(bad)]) == 2
  assert "bias_spec.rho_q" in capsys.readouterr().err
  conf = tmp_path / "c.yaml"
  conf.write_text(TINY)
  monkeypatch.setattr(harness, "run_seed", lambda *a, **k: (_ for _ in ()).throw(RuntimeError("down")))
  assert cli.main(["run-all", "--config", str(conf), "--out", str(tmp_path / "o"), "--quiet"]) == 1
  assert cli.main(["report", "--config", str(conf), "--out", str(tmp_path / "empty"), "--quiet"]) == 1


def test_cli_seed_override_and_module_entry(tmp_path):
  conf = tmp_path / "c.yaml"
  conf.write_text(TINY)
  out = tmp_path / "one"
  assert cli.main(["generate-data", "--config", str(conf), "--seed", "3", "--out", str(out), "--quiet"]) == 0
  assert [p.name for p in (out / "data").iterdir()] == ["seed_3"]
  proc = subprocess.run([sys.executable, "-m", "causal_infomin", "--help"], capture_output=True, text=True)
  assert proc.returncode == 0
  for cmd in cli.SUBCOMMANDS:
    assert cmd in proc.stdout


def test_ensure_data_regenerates_on_spec_change(tmp_path):
  cfg = tiny(tmp_path)
  harness.generate_data(cfg, 0)
  cfg.bias_spec = BiasSpec(n_train=300, n_test=200, block_dim=8, num_classes=4)
  assert len(harness.ensure_data(cfg, 0).train) == 300
