import copy

import numpy as np
import pytest

from ulim.config import RunConfig
from ulim.dual_interest import train
from ulim.pgin import train_pgin
from ulim.retrieval import build_indexes
from ulim.synth import synth_generate

TINY = {
    "data": {"n_users": 60, "n_items": 300, "n_categories": 8, "seq_len": 30, "interests_per_user": 3,
             "session_len": 4, "seed": 0},
    "sequence": {"max_long": 24, "short_len": 6},
    "model": {"d": 16, "heads": 2, "tower_hidden": 16},
    "train": {"epochs": 2, "n_negatives": 16, "batch_size": 32, "max_samples_per_user": 4},
    "pgin": {"d": 16, "heads": 2, "hidden": 16, "epochs": 2, "max_samples_per_user": 4},
    "retrieval": {"k": 3, "n_total": 50},
    "eval": {"cutoffs": [10, 50], "seeds": [0]},
}


def tiny_dict():
    return copy.deepcopy(TINY)


@pytest.fixture(scope="session")
def tiny_run():
    return RunConfig.from_dict(tiny_dict())


@pytest.fixture(scope="session")
def tiny_data(tiny_run):
    return synth_generate(tiny_run.data)


@pytest.fixture(scope="session")
def tiny_models(tiny_run, tiny_data):
    """Trained dual model, PGIN and IVF-backed indexes on the tiny dataset (read-only)."""
    dual = train(tiny_data, tiny_run.model, tiny_run.sequence, tiny_run.train).model
    pgin = train_pgin(tiny_data, tiny_run.sequence, tiny_run.pgin).model
    indexes = build_indexes(dual, tiny_data.catalog, ivf=True, seed=0)
    return dual, pgin, indexes


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion at the end of the run
# ---------------------------------------------------------------------------

_criteria: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (report.when == "call" or report.failed or report.skipped):
        return
    n = marker.args[0]
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "measured")
    ok = report.passed and report.when == "call"
    prev = _criteria.get(n)
    if prev is not None:
        ok = ok and prev[0]
        detail = "; ".join(x for x in (prev[1], detail) if x)
    _criteria[n] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        ok, detail = _criteria[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
