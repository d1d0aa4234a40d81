import os

import pytest

from processors import DatasetProcessor, DatasetSpec
from ssf.model.config import preset
from ssf.model.vit import build_model


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training runs, enabled with SSF_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.getenv("SSF_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set SSF_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def toy_cfg():
    return preset("toy")


@pytest.fixture
def toy_model(toy_cfg):
    """Fresh (params, graph) for the toy preset, float32"""
    return build_model(toy_cfg, "f32")


@pytest.fixture(scope="session")
def downstream_splits():
    spec = DatasetSpec(task_id="downstream_shifted", seed=3, n_train=64, n_val=16)
    return DatasetProcessor.gen_synthetic(spec)


@pytest.fixture(scope="session")
def pretrained():
    """Seeded toy backbone shared read-only across tests"""
    params, _ = build_model(preset("toy"), "f32")
    return params
