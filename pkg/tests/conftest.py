import numpy as np
import pytest

from procplan.data import make_dataset


@pytest.fixture(scope="session")
def small_dataset():
    """Two events over ten actions, enough windows for quick training runs."""
    return make_dataset(E=2, N=10, actions_per_event=5, sigma=0.1, seed=11,
                        n_videos=40, video_length=6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
