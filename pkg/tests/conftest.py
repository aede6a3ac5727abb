import numpy as np
import pytest

from vcslab import envs, iql
from vcslab.config import preset


@pytest.fixture(scope="session")
def grid_ds():
    return envs.grid_dataset()


@pytest.fixture(scope="session")
def grid_critic(grid_ds):
    """Value pretraining on the two-trajectory grid with the demo settings."""
    return iql.train_iql(grid_ds, preset("stitch-grid").iql).ensemble


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
