import numpy as np
import pytest

from icrlab.task_data import TaskConfig

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict = {}


@pytest.fixture
def small_cfg():
    return TaskConfig(N=12, H=24, d=32, Q=(1, 2), O=(3, 4))


@pytest.fixture
def small_noisy(small_cfg):
    return small_cfg.with_alpha(0.3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
