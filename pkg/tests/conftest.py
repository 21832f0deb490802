import pathlib

import pytest

ROOT = pathlib.Path(__file__).resolve().parent.parent


@pytest.fixture
def scenarios_dir():
    return ROOT / "scenarios"
