import numpy as np
import pytest


@pytest.fixture(autouse=True, scope="session")
def _isolated_cache(tmp_path_factory):
    """Keep limit-law tables produced by the tests out of the user's cache."""
    mp = pytest.MonkeyPatch()
    mp.setenv("ADFGOF_CACHE_DIR", str(tmp_path_factory.mktemp("adfgof_cache")))
    yield
    mp.undo()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
