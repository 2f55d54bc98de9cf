import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fast_config(**kw):
    """Study configuration with small ensembles so pipeline tests run in seconds."""
    from calibra.data import LearnerSpec, StudyConfig

    return StudyConfig(
        ps_candidates=(LearnerSpec("RidgeMultinomial"),
                       LearnerSpec("RandomForest", {"n_trees": 40}),
                       LearnerSpec("GradientBoosting", {"max_trees": 40})),
        cm_candidates=(LearnerSpec("RidgeRegression"),
                       LearnerSpec("RandomForest", {"n_trees": 40}),
                       LearnerSpec("GradientBoosting", {"max_trees": 40})),
        **kw)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
