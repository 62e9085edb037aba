import numpy as np
import pytest

from anchorudf.geometry import build_index, make_synthetic, normalize_mesh


@pytest.fixture(scope="session")
def hemisphere():
    """Normalized hemisphere: radius 0.5, sphere centre (0, 0, -0.25), rim at z = -0.25."""
    mesh, _ = normalize_mesh(make_synthetic("hemisphere", 16))
    return mesh


@pytest.fixture(scope="session")
def hemisphere_index(hemisphere):
    return build_index(hemisphere)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import REPORT

    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)
