import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from strobe.bev import GridSpec
from strobe.net import ArchConfig

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_arch(cells: int = 16, **kw) -> ArchConfig:
    """Small network on a ``cells`` x ``cells`` grid with a handful of z bins."""
    grid = GridSpec(extent_x=cells * 0.2, extent_y=cells * 0.2, z_min=-2.0, z_max=-2.0 + 4 * 0.2)
    base = dict(lidar_layers=(1, 1, 1, 1), lidar_channels=(2, 2, 2, 2), map_layers=(1, 1, 1, 1),
                map_channels=(1, 1, 1, 1), fusion_layers=1, fusion_channels=2, header_channels=2,
                halo=8, region_halo=8, stride=8, grid=grid)
    base.update(kw)
    return ArchConfig(**base)


def scene_arch(cells: int = 128, **kw) -> ArchConfig:
    """Small network whose z bins cover simulated returns (which sit at z >= 0)."""
    grid = GridSpec(extent_x=cells * 0.2, extent_y=cells * 0.2, z_min=0.0, z_max=2.0, z_step=0.5)
    base = dict(lidar_channels=(4, 4, 4, 4), fusion_channels=8, header_channels=8, grid=grid)
    base.update(kw)
    return tiny_arch(cells, **base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
