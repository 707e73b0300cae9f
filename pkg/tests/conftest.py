import numpy as np
import pytest

from quancrypt import ckks
from quancrypt.data import load_mnist


@pytest.fixture(scope="session")
def toy_ctx():
    return ckks.create_context(1024, (50, 40, 50), 2.0**30)


@pytest.fixture(scope="session")
def toy_keys(toy_ctx):
    return ckks.keygen(toy_ctx, 11)


@pytest.fixture(scope="session")
def desk_ctx():
    return ckks.create_context(8192, (60, 40, 40, 60), 2.0**40)


@pytest.fixture(scope="session")
def desk_keys(desk_ctx):
    return ckks.keygen(desk_ctx, 5)


@pytest.fixture(scope="session")
def mnist():
    return load_mnist()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance

_VERDICTS: list[tuple[int, str, str, list]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        number, title = mark.args
        verdict = "PASS" if report.passed else "FAIL"
        _VERDICTS.append((number, title, verdict, list(item.user_properties)))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, verdict, props in sorted(_VERDICTS):
        detail = ", ".join(f"{k}={v}" for k, v in props)
        terminalreporter.write_line(f"criterion {number:2d} {verdict}: {title}" + (f" [{detail}]" if detail else ""))
