import os
import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

FIXTURES = Path(__file__).parent / "fixtures" / "data"


@pytest.fixture(scope="session")
def data_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def bundles():
    from hwsupply.ingest import data_files, read_bundles

    return read_bundles(data_files(FIXTURES))


@pytest.fixture(scope="session")
def at(bundles):
    return bundles["AT"]


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
