import os

import pytest

import model as model_core

ROOT = os.path.dirname(os.path.abspath(__file__))


@pytest.fixture
def data_path():

    def path(*parts: str) -> str:
        return os.path.join(ROOT, *parts)

    return path


@pytest.fixture
def two_state():
    return model_core.two_state(1.0, 1.0, 1.0, 1.0)
