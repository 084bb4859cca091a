from pathlib import Path

import pytest

from markovfp.problem import load_scenario

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def ou_fixture():
    return load_scenario(FIXTURES / "ou.toml")
