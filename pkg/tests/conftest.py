import importlib.resources

import pytest

from defect_bands.cli import load_config, spec_from_config


def config_path(name):
    return str(importlib.resources.files("defect_bands") / "configs" / name)


def load_model(name):
    return spec_from_config(load_config(config_path(name)))


@pytest.fixture(scope="session")
def chain_model():
    return load_model("chain.json")


@pytest.fixture(scope="session")
def chain_defect_model():
    return load_model("chain_point_defect.json")


@pytest.fixture(scope="session")
def square_model():
    return load_model("square.json")


@pytest.fixture(scope="session")
def square_line_model():
    return load_model("square_line_defect.json")


@pytest.fixture(scope="session")
def bipartite_model():
    return load_model("bipartite_chain.json")
