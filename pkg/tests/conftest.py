import time
from dataclasses import dataclass

import pytest

from unkgcp.dataset import SplitDataset, split
from unkgcp.testbed import generate_planted
from unkgcp.unkge import TrainConfig, fit
from unkgcp.unkge.model import ModelParams

# Settings for the 500-entity planted world; the validation criterion uses
# positives only because uniform corruptions of a planted world are not false.
PLANTED_CFG = TrainConfig(learning_rate=0.01, dim=16, batch_size=256, neg_per_pos=1, patience=30, max_epochs=300,
                          neg_weight=0.001, seed=3, early_stop="pos")


@dataclass
class Pipeline:
    data: SplitDataset
    model: ModelParams
    train_seconds: float


def build_pipeline(world_seed=1, split_seed=2, heteroscedastic=False, sigma=0.05, cfg=PLANTED_CFG):
    _, ts = generate_planted(500, 5, 16, 20_000, noise_sigma=sigma, heteroscedastic=heteroscedastic,
                             seed=world_seed)
    data = split(ts, seed=split_seed)
    start = time.perf_counter()
    model = fit(data, cfg).params
    return Pipeline(data, model, time.perf_counter() - start)


@pytest.fixture(scope="session")
def planted():
    return build_pipeline()


@pytest.fixture(scope="session")
def planted_hetero():
    return build_pipeline(heteroscedastic=True, sigma=0.1)


# --------------------------------------------------------------------------
# acceptance summary

_RESULTS: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if report.when == "setup" and report.skipped:
        reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else str(report.longrepr)
        _RESULTS[n] = ("NOT RUN", title, reason.removeprefix("Skipped: "))
    elif report.when == "call":
        if report.skipped:
            reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else ""
            _RESULTS[n] = ("NOT RUN", title, reason.removeprefix("Skipped: "))
        else:
            _record(n, "PASS" if report.passed else "FAIL", title, detail)
    elif report.failed:
        _record(n, "FAIL", title, f"{report.when} error")


def _record(n, status, title, detail):
    # parametrized criteria: any failure wins, details accumulate
    if n in _RESULTS and _RESULTS[n][0] in ("PASS", "FAIL"):
        prev, _, prev_detail = _RESULTS[n]
        status = "FAIL" if "FAIL" in (prev, status) else "PASS"
        detail = "; ".join(d for d in (prev_detail, detail) if d)
    _RESULTS[n] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, title, detail = _RESULTS[n]
        line = f"criterion {n:>2} {status:<7} {title}"
        if detail:
            line += f" | {detail}"
        terminalreporter.write_line(line)
