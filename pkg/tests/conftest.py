import numpy as np
import pytest

from commonrep.data import SceneSpec, generate_dataset
from commonrep.training import TrainConfig


@pytest.fixture(scope="session")
def tiny_data():
    return generate_dataset(SceneSpec(seed=11, height=16, width=16, n_classes=4), 24)


def tiny_config(**kw):
    base = dict(n_classes=4, feature_channels=6, hidden_channels=3, stage1_iters=6, stage2_iters=4, batch_size=4)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
