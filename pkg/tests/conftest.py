import numpy as np
import pytest

from tardos_dnn import ChannelSpec, TardosParams, estimate_score_distributions, generate_codebook


@pytest.fixture(scope="session")
def small_params():
    return TardosParams(q=10, m=200, kappa=0.1, c0=6, seed=11)


@pytest.fixture(scope="session")
def small_codebook(small_params):
    return generate_codebook(small_params, 30)


@pytest.fixture(scope="session")
def small_dists(small_codebook):
    return estimate_score_distributions(small_codebook, ChannelSpec((0,)), 6, 60, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion(request):
    """``criterion(n, title, ok, detail)`` logs a PASS/FAIL line and asserts ``ok``."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def report(n, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {title}" + (f" ({detail})" if detail else "")
        _ACCEPTANCE.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
