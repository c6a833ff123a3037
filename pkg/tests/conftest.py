from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_world():
    """A small source/target world with a briefly pretrained detector (shared, read-only)."""
    from sparsect import config as config_mod
    from sparsect.detector.training import Schedule, pretrain
    from sparsect.pipeline import init_detector, local_truths, synthesize

    cfg = config_mod.load_config(overrides={"data": {"n_source": 60, "n_target_pool": 60, "n_test": 8}})
    subsets, meta = synthesize(cfg, 0)
    model = init_detector(cfg, len(meta["source_classes"]), np.random.default_rng(0))
    images = np.stack([s.image for s in subsets["source"]])
    model, log = pretrain(model, images, local_truths(subsets["source"], meta["source_classes"]),
                          Schedule(60, 8, 0.05, (40,)), seed=0)
    return {"cfg": cfg, "subsets": subsets, "meta": meta, "model": model, "log": log}


_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: numbered acceptance criterion")


def pytest_runtest_logreport(report):
    name = report.nodeid.split("::")[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number = int(name.split("_")[2])
        passed, details = _criteria.get(number, (True, []))
        detail = dict(report.user_properties).get("detail")
        _criteria[number] = (passed and report.outcome == "passed", details + [detail] if detail else details)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        passed, detail = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {'; '.join(detail)}")
