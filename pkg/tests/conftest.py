import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

try:
    from hypothesis import HealthCheck, settings

    settings.register_profile(
        "suite", max_examples=40, deadline=None,
        suppress_health_check=[HealthCheck.too_slow])
    settings.load_profile("suite")
except ImportError:
    pass


@pytest.fixture(scope="session")
def case9_text():
    return (Path(__file__).parent / "data" / "case9.m").read_text()
