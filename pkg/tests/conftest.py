import pytest

from impedance_irl.config import load_env_spec


@pytest.fixture(scope="session")
def peg():
    return load_env_spec("peg_in_hole")


@pytest.fixture(scope="session")
def cup():
    return load_env_spec("cup_on_plate")


@pytest.fixture(scope="session")
def reach():
    return load_env_spec("reach")
