import numpy as np
import pytest

from effserve import classifiers as cl
from effserve import numkit as nk
from effserve import synthdomain as sd

TASKS = (cl.TaskSpec("dirt", "Dirt", "Normal"), cl.TaskSpec("defect", "Defect", "Normal"))


@pytest.fixture(scope="session")
def domain():
    return sd.generate(sd.default_config(seed=0))


@pytest.fixture(scope="session")
def trained(domain):
    """Unified, multi-task and per-task models on the default domain (short schedule)."""
    tc = nk.TrainConfig(epochs=8, seed=0)
    spec = cl.default_multitask_heads(domain.train.scheme, ["Dirt", "Defect", "BubbleWash"])
    return {
        "unified": cl.train_unified(domain.train, tc),
        "multitask": cl.train_multitask(domain.train, spec, tc),
        "dirt": cl.train_task(domain.train, TASKS[0], tc),
        "defect": cl.train_task(domain.train, TASKS[1], tc),
    }


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
