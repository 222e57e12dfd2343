import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from crossview.store import synth_dataset  # noqa: E402
from crossview.trainer import TrainConfig, train  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth7():
    """The reference synthetic set: C=10, 50 per class, D=32, sigma=0.1, seed 7."""
    return synth_dataset(classes=10, per_class=50, dim=32, noise=0.1, seed=7)


@pytest.fixture(scope="session")
def trained(synth7):
    ds = synth7[0]
    return {pool: train(ds, TrainConfig(pool=pool)) for pool in ("avg", "att")}


def unit_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# acceptance criteria register their outcome here; printed at session end
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=str):
        ok, title, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key}. {title}: {detail}")
