from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from cardioestim.harness import generate_target, preset
from cardioestim.model import Model
from cardioestim.params import baseline_parameters

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def base():
    return baseline_parameters()


@pytest.fixture(scope="session")
def smooth_model(base):
    return Model("direct", base, smoothing_width=0.1)


@pytest.fixture(scope="session")
def t_lv_config():
    return preset("T_LV", snr=0.0, seed=0)


@pytest.fixture(scope="session")
def t_lv_obs(t_lv_config):
    """Noise-free T_LV target at the baseline parameters."""
    return generate_target(t_lv_config.truth_vector(), t_lv_config)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(capsys):
    """Record one pass/fail line per acceptance criterion and echo it immediately."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"CRITERION {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
