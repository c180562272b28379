import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=15,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small generated dataset shared by the I/O, training and CLI tests."""
    from nsl_lab.dataset_io import DatasetConfig, generate_dataset

    root = tmp_path_factory.mktemp("tiny") / "data"
    cfg = DatasetConfig(width=64, height=48, n_val=4, n_test=4)
    return generate_dataset(12, seed=5, config=cfg, root=root)


# -- acceptance summary: one line per @pytest.mark.criterion test ----------------------

_VERDICTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    details = [v for k, v in item.user_properties if k == "detail"]
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    if status == "FAIL" or n not in _VERDICTS:
        _VERDICTS[n] = (status, title, "; ".join(details))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        status, title, detail = _VERDICTS[n]
        terminalreporter.write_line(f"{status} {n:2d} {title}" + (f"  [{detail}]" if detail else ""))
