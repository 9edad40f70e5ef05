import numpy as np
import pytest

from userkws.synthetic import make_corpus

# criterion number -> list of (test id, outcome)
_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test verifies")


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE.setdefault(crit, []).append((report.nodeid.split("::")[-1], report.outcome))


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", m.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for crit in sorted(_ACCEPTANCE):
        results = _ACCEPTANCE[crit]
        ok = all(o == "passed" for _, o in results)
        detail = ", ".join(f"{name}={o}" for name, o in results)
        tr.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'}  ({detail})")


# 12 pretraining speakers with 2 takes per word, 3 adaptation speakers
SPEAKERS = {f"{i:08x}": 2 for i in range(1, 13)}
SPEAKERS.update({"ada00001": 6, "ada00002": 4, "ada00003": 12})


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    return make_corpus(tmp_path_factory.mktemp("gsc"), SPEAKERS)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
