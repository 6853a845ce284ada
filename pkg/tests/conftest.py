import numpy as np
import pytest

from vnb.bench import _train_for_regime
from vnb.dynamics import TrainConfig
from vnb.grasp import HandModel
from vnb.sim import FrictionRegime, Simulator, object_by_name


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def hand():
    return HandModel.default()


@pytest.fixture(scope="session")
def tiny_nets():
    """Small trained nets shared by planner-level tests (k=4, short run)."""
    return _train_for_regime("nominal", 4, ("sphere-small",),
                             TrainConfig(epochs=4), 99, 4)


@pytest.fixture
def grasping_env():
    """Nominal sphere env closed until at least three contacts exist."""
    env = Simulator(object_by_name("sphere-small"), FrictionRegime("nominal"),
                    np.random.default_rng(7))
    for _ in range(40):
        env.step(np.full(6, 0.2))
        if env.n_contacts() >= 3:
            break
    return env
