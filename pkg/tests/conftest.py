import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

from dataclasses import dataclass  # noqa: E402

import numpy as np  # noqa: E402
import pytest  # noqa: E402
from hypothesis import HealthCheck, settings  # noqa: E402

from prom3e.config import RunConfig, SynthConfig, reference_config  # noqa: E402
from prom3e.model import ModelParams  # noqa: E402
from prom3e.synthdata import generate, split  # noqa: E402
from prom3e.trainer import fit  # noqa: E402

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# train / val / test = 2000 / 200 / 200 of the default 2400 records
REFERENCE_FRACTIONS = (10 / 12, 1 / 12, 1 - 10 / 12 - 1 / 12)


@dataclass
class Run:
    config: RunConfig
    params: ModelParams
    report: object
    train: object
    val: object
    test: object
    checkpoint: str


def _train(tmp_path_factory, name, **overrides) -> Run:
    rc = reference_config(**overrides)
    ds = generate(rc.synth)
    train, val, test = split(ds, REFERENCE_FRACTIONS, seed=rc.train.seed)
    path = str(tmp_path_factory.mktemp(name) / f"{name}.pm3c")
    params, report = fit(train, val, rc, checkpoint_path=path)
    return Run(rc, params, report, train, val, test, path)


@pytest.fixture(scope="session")
def reference_run(tmp_path_factory) -> Run:
    """The desk-scale contrastive reference run (about three minutes on one core)."""
    return _train(tmp_path_factory, "reference")


@pytest.fixture(scope="session")
def mse_run(tmp_path_factory) -> Run:
    """Same budget and data as the reference run, trained with plain MSE."""
    return _train(tmp_path_factory, "mse", loss_kind="mse")


@pytest.fixture(scope="session")
def diversity_run(tmp_path_factory) -> Run:
    """Reference recipe on a diversity-gradient dataset."""
    return _train(tmp_path_factory, "diversity", diversity_gradient=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_ds():
    return generate(SynthConfig(records=120, species=6, d_in=8, seed=3))


# acceptance summary -----------------------------------------------------------------


def pytest_configure(config):
    config.acceptance_lines = {}


@pytest.fixture
def criterion(pytestconfig):
    """Record one PASS/FAIL line for a numbered criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        pytestconfig.acceptance_lines[number] = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}"
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
