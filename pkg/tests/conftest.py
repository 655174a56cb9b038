import numpy as np
import pytest

from activesearch.classifier import OracleScorer
from activesearch.forest import ForestConfig, train_forest
from activesearch.search import initial_window
from activesearch.synthetic import SyntheticConfig, generate_synthetic

_ACCEPTANCE: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    ok = report.passed if report.when == "call" else not report.failed
    prev = _ACCEPTANCE.get(number, (title, True, []))
    notes = prev[2] + [f"{k}={v}" for k, v in report.user_properties
                       if f"{k}={v}" not in prev[2]]
    _ACCEPTANCE[number] = (title, prev[1] and ok and not report.skipped, notes)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok, notes = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
        for note in notes:
            terminalreporter.write_line(f"    {note}")


@pytest.fixture(scope="session")
def small_config():
    return SyntheticConfig(n_train=24, n_test=8, proposals_per_image=150, seed=7)


@pytest.fixture(scope="session")
def small_data(small_config):
    return generate_synthetic(small_config)


@pytest.fixture(scope="session")
def small_forest(small_data):
    train, _ = small_data
    cfg = ForestConfig(n_trees=3, images_per_tree=12, max_depth=10, n_candidates=40)
    model = train_forest(train, "car", cfg, rng_seed=1)
    model.start_window = initial_window(train, "car").as_array()
    return model


@pytest.fixture(scope="session")
def small_scorer(small_data):
    _, test = small_data
    return OracleScorer(test, "car", noise=0.05, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
