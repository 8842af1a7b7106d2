import pytest
from helpers import write_tag

from ranforge.clock import VirtualClock
from ranforge.testbed import Testbed


@pytest.fixture
def repo(tmp_path):
    root = tmp_path / "repo"
    write_tag(root, "v2.1.0", "a" * 40, "2024-06-01T00:00:00Z")
    return root


@pytest.fixture
def clock():
    return VirtualClock("2024-07-01T00:00:00Z")


@pytest.fixture
def testbed(tmp_path, clock):
    tb = Testbed(tmp_path / "data", clock=clock)
    yield tb
    tb.close()
