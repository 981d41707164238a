import numpy as np
import pytest

from fused.config import config_from_dict
from fused.data import Dataset, gen_synthetic
from fused.model import new_mlp
from fused.numcore import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def small_model(rng):
    return new_mlp([4, 5, 3], 0.5, rng)


@pytest.fixture
def small_data(rng):
    return gen_synthetic(3, 4, 10, 0.5, rng)


def tiny_config(**blocks):
    """A quick config: small data, few rounds, no relearning."""
    raw = {
        "data": {"classes": 4, "dim": 6, "per_class_train": 40, "per_class_test": 20},
        "model": {"hidden": [8]},
        "partition": {"n_clients": 4},
        "unlearning": {"pretrain_rounds": 3, "rounds": 2, "K": 1},
        "evaluation": {"relearn_rounds": 0},
    }
    for block, values in blocks.items():
        if isinstance(values, dict):
            raw.setdefault(block, {}).update(values)
        else:
            raw[block] = values
    return config_from_dict(raw)


def random_dataset(rng, n, dim, classes):
    return Dataset(rng.standard_normal((n, dim)), rng.integers(0, classes, n), classes)


# Acceptance criteria record one verdict line each; they are echoed in the terminal summary.
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
