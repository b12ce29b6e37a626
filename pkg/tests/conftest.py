import numpy as np
import pytest

from lv_storage_opt.battery import table_defaults
from lv_storage_opt.grid import load_network
from lv_storage_opt.powerflow import linearize

from pathlib import Path

FIXTURE = Path(__file__).resolve().parents[1] / "src" / "lv_storage_opt" / "data" / "feeder18.json"


@pytest.fixture(scope="session")
def feeder_path():
    return FIXTURE


@pytest.fixture(scope="session")
def feeder(feeder_path):
    return load_network(feeder_path)


@pytest.fixture(scope="session")
def feeder_lin(feeder):
    net, _ = feeder
    return linearize(net)


@pytest.fixture(scope="session")
def battery_params():
    return table_defaults()


@pytest.fixture()
def rng():
    return np.random.default_rng(20260808)
