import numpy as np
import pytest

from mapid.config import PRESETS, build_config
from mapid.maps import GaussianMap, LogisticMap, TinkerbellMap, sample_linspace, trajectory_dataset
from mapid.netcore import NetworkConfig
from mapid.settings import Settings


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: training-scale runs, enabled by MAPID_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if Settings().run_slow:
        return
    skip = pytest.mark.skip(reason="set MAPID_RUN_SLOW=1 to run training-scale tests")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    """Tests never inherit a seed or worker override from the shell."""
    monkeypatch.delenv("MAPID_SEED", raising=False)
    monkeypatch.delenv("MAPID_WORKERS", raising=False)


@pytest.fixture
def logistic():
    return LogisticMap()


@pytest.fixture
def gaussian():
    return GaussianMap()


@pytest.fixture
def tinkerbell():
    return TinkerbellMap()


@pytest.fixture
def logistic_data():
    return trajectory_dataset(LogisticMap(), [0.5], 200)


@pytest.fixture
def gaussian_wide_data():
    return sample_linspace(GaussianMap(), -1.0, 1.0, 200)


@pytest.fixture
def tinkerbell_data():
    return trajectory_dataset(TinkerbellMap(), [-0.5, -0.5], 200)


@pytest.fixture(params=sorted(PRESETS))
def preset_network(request) -> NetworkConfig:
    return NetworkConfig.model_validate(PRESETS[request.param]["network"])


@pytest.fixture
def tiny_config():
    """Logistic experiment small enough to train in seconds."""
    return build_config(
        "logistic",
        {
            "sigmas": ["0"],
            "sampling.steps": "80",
            "train.instances": "2",
            "train.folds": "2",
            "train.epochs": "40",
            "train.cycle_epochs": "20",
            "shadow_steps": "10",
            "portrait.grid": "11",
        },
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
