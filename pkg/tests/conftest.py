import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    from pleomorph.dataset import DatasetConfig, build_dataset

    return build_dataset(DatasetConfig(n_train_cases=6, n_val_cases=3, n_test_cases=6, rois_per_case=1,
                                       roi_size=96, n_slides=2))


# criterion -> (passed, detail); filled by test_acceptance.py, printed after the run
ACCEPTANCE_RESULTS = {}


@pytest.fixture
def record_criterion():
    def record(criterion, passed, detail):
        ACCEPTANCE_RESULTS[criterion] = (bool(passed), detail)
        print(f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE_RESULTS, key=lambda c: int(c[1:])):
        passed, detail = ACCEPTANCE_RESULTS[criterion]
        terminalreporter.line(f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}")
