import numpy as np
import pytest

from moie.blackbox import BlackboxConfig, ProjectionConfig, train_blackbox, train_projection
from moie.datagen import SynthConfig, generate_synthetic, split
from moie.pipeline import DistillConfig, run_moie

SMALL_BB = BlackboxConfig(hidden=(64, 32), epochs=15, lr=0.003)


@pytest.fixture(scope="session")
def small_splits():
    data = generate_synthetic(SynthConfig(n=3000, seed=11))
    return split(data, seed=11)


@pytest.fixture(scope="session")
def small_blackbox(small_splits):
    tr, va, _ = small_splits
    bb = train_blackbox(tr, va, SMALL_BB)
    pr = train_projection(bb, tr, va, ProjectionConfig(epochs=30))
    return bb, pr


@pytest.fixture(scope="session")
def small_model(small_splits, small_blackbox):
    tr, va, _ = small_splits
    bb, pr = small_blackbox
    return run_moie(bb, pr, tr, va, DistillConfig(epochs=15, residual_epochs=8, max_experts=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_lines():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
