import numpy as np
import pytest

from casdm.config import from_dict
from casdm.schedule import make_schedule


def tiny_config(**blocks):
    """A config small enough that a training step takes a few milliseconds."""
    raw = {
        "model": {"channels": 8, "blocks": 1, "levels": 1},
        "schedule": {"T": 100},
        "train": {"steps": 6, "batch_size": 4, "ckpt_every": 3},
        "data": {"n": 32},
        "sample": {"steps": 5},
    }
    for k, v in blocks.items():
        raw.setdefault(k, {}).update(v)
    return from_dict(raw)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def cos1000():
    return make_schedule("cosine", 1000)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, whatever the outcome."""
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
