import numpy as np
import pytest
import torch
from hypothesis import settings

from lwm.netcore import set_deterministic

settings.register_profile("lwm", deadline=None, max_examples=60)
settings.load_profile("lwm")

set_deterministic(True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net():
    from lwm.netcore import NetworkModel

    return NetworkModel.small_convnet(5, in_channels=3, image_size=8, seed=3, channels=(4, 6))


def images(rng, n, c=3, s=8):
    return torch.as_tensor(rng.random((n, c, s, s)), dtype=torch.float64)


_criteria: dict = {}


@pytest.fixture
def criterion():
    """Record a criterion verdict, then assert it."""

    def record(number, passed, detail):
        _criteria[number] = (bool(passed), detail)
        assert passed, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        passed, detail = _criteria[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
