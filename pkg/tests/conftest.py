import os

import pytest
import torch
from absl import flags
from hypothesis import HealthCheck, settings

from causal_infomin import netcore  # noqa: F401  (sets float64 as the default dtype)
from causal_infomin.baseline import ModelShape, train_biased
from causal_infomin.netcore import TrainConfig
from causal_infomin.synthbias import BiasSpec, make_dataset

# absl's TestCase helpers (create_tempdir) read flags that pytest never parses
flags.FLAGS.mark_as_parsed()

settings.register_profile(
    "repo", derandomize=True, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))

# filled by tests/test_acceptance.py, printed once at the end of the session
CRITERIA_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    CRITERIA_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA_LINES):
        terminalreporter.write_line(CRITERIA_LINES[number])


@pytest.fixture(autouse=True)
def _float64():
    torch.set_default_dtype(torch.float64)
    yield


SMALL_SPEC = BiasSpec(n_train=800, n_test=400, block_dim=8, num_classes=4, seed=3)
SMALL_SHAPE = dict(hidden=16, fusion_hidden=32, m=4, d_f=8)


@pytest.fixture(scope="session")
def small_bundle():
    return make_dataset(SMALL_SPEC)


@pytest.fixture(scope="session")
def small_shape():
    return ModelShape.for_spec(SMALL_SPEC, **SMALL_SHAPE)


@pytest.fixture(scope="session")
def small_baseline(small_bundle, small_shape):
    return train_biased(small_bundle, TrainConfig(epochs=8, seed=0), small_shape)
