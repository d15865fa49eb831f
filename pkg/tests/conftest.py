import numpy as np
import pytest

from capo.planner import IdmPlanner
from capo.simworld import PedestrianParams, WorldConfig, collect_dataset


@pytest.fixture(scope="session")
def world_cfg():
    return WorldConfig()


@pytest.fixture(scope="session")
def planner(world_cfg):
    return IdmPlanner.for_world(world_cfg)


@pytest.fixture(scope="session")
def small_dataset(world_cfg):
    """Two expert episodes sliced into scenes; shared by the slower tests."""
    return collect_dataset(world_cfg, PedestrianParams(), n_episodes=2, seed=321)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
