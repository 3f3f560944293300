import numpy as np
import pytest

from magtac.config import preset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    """3x3 grid, 32 px images: 9 presses x 40 samples."""
    from dataclasses import replace

    cfg = preset("desk")
    from magtac.elastomer import RenderConfig

    return replace(cfg, render=RenderConfig.for_size(32), dataset=replace(cfg.dataset, grid_size=3))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_config):
    from magtac.dataset import generate_dataset

    return generate_dataset(tiny_config, tmp_path_factory.mktemp("tiny"))


_CRITERIA = []


@pytest.fixture
def criterion():
    """``report(n, title, passed, detail)`` records one acceptance line and returns ``passed``."""

    def report(n, title, passed, detail):
        line = f"CRITERION {n} {'PASS' if passed else 'FAIL'}: {title} ({detail})"
        _CRITERIA.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
