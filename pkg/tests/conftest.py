import copy

import pytest
import torch

from skd_cil.cil import train_classifier
from skd_cil.config import desk_config
from skd_cil.data import DIGITS, DataSource
from skd_cil.delegate import train_skd
from skd_cil.evalkit import as_eval_set
from skd_cil.networks import build_classifier

torch.set_num_threads(1)
torch.use_deterministic_algorithms(True, warn_only=True)

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def record_criterion():
    def record(name, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


@pytest.fixture(scope="session")
def digits_source():
    return DataSource(DIGITS)


@pytest.fixture(scope="session")
def all_classes_val(digits_source):
    val = digits_source.load_task_data(range(10), "val")
    return as_eval_set(val, {i: i for i in range(10)})


@pytest.fixture(scope="session")
def desk_teacher(digits_source):
    """Desk CNN trained on all ten digit classes (output column == digit)."""
    model = build_classifier("desk-cnn", 10, DIGITS.input_shape, seed=0)
    torch.manual_seed(0)
    train_classifier(model, digits_source.load_task_data(range(10), "train"), epochs=30, lr=0.05, seed=0)
    return model


def desk_skd_config(**weights):
    cfg = desk_config().resolved_skd()
    if weights:
        from skd_cil.losses import ExploreWeights
        cfg.explore_weights = ExploreWeights(**{**cfg.explore_weights.__dict__, **weights})
    return cfg


@pytest.fixture(scope="session")
def desk_skd(desk_teacher):
    """Full-method delegator/student for the ten-class desk teacher."""
    return train_skd(copy.deepcopy(desk_teacher), None, desk_skd_config())
