import numpy as np
import pytest

from vipt.config import FoundationConfig, gradcheck_config, toy_config
from vipt.model import build_store


@pytest.fixture
def tiny_cfg():
    """D=16, L=2, d=4, patch 8, template 16, search 32."""
    return gradcheck_config()


@pytest.fixture
def tiny_store(tiny_cfg):
    return build_store(tiny_cfg)


@pytest.fixture
def toy_cfg():
    return toy_config()


def _random_images(fcfg: FoundationConfig, seed: int, channels: int = 3):
    rng = np.random.default_rng(seed)
    t, s = fcfg.template_size, fcfg.search_size
    return (
        rng.standard_normal((channels, t, t)),
        rng.standard_normal((channels, s, s)),
        rng.standard_normal((channels, t, t)),
        rng.standard_normal((channels, s, s)),
    )


@pytest.fixture
def make_images():
    """``(z_rgb, x_rgb, z_aux, x_aux)`` of standard-normal pixels sized for a config."""
    return _random_images


ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one summary line per acceptance criterion for the terminal report."""
    return request.config.stash.setdefault(ACCEPTANCE_LINES, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
