import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable

from vpcmemo.camera import CameraPose, Intrinsics
from vpcmemo.scenario import builtin_scenario_path, load_scenario


@pytest.fixture(scope="session")
def paper_scenario():
    return load_scenario(builtin_scenario_path("sim_paper"))


@pytest.fixture(scope="session")
def open_scenario(paper_scenario):
    """Paper geometry with the occlusions removed."""
    return paper_scenario.without_keepouts()


@pytest.fixture
def default_intrinsics():
    return Intrinsics(fu=500.0, fv=500.0, cu=512.0, cv=512.0, width=1024, height=1024)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pose(rng, position_scale=0.3, angle_scale=0.2) -> CameraPose:
    from vpcmemo.camera import quat_from_rotvec
    return CameraPose(rng.uniform(-position_scale, position_scale, 3),
                      quat_from_rotvec(rng.uniform(-angle_scale, angle_scale, 3)))
