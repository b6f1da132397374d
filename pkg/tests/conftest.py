import numpy as np
import pytest
import torch

from frinet.backbone import random_backbone
from frinet.synthetic import generate_synthetic_dataset


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic_dataset(num_images=60, rng_seed=3)


@pytest.fixture(scope="session")
def toy_backbone():
    return random_backbone(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


# -- acceptance summary: one line per criterion at the end of the run

@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    detail = dict(item.user_properties).get("detail", "")
    verdict = "PASS" if rep.passed else "FAIL"
    item.config.stash.setdefault(_LINES, []).append((mark.args[0], f"criterion {mark.args[0]:>2} {verdict}  {mark.args[1]}  {detail}"))


_LINES = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
