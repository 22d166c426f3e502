import numpy as np
import pytest

from mixcure.data import Censoring, Covariate, simulate
from mixcure.model import INTERCEPT, Dataset


def intercept_only(times, events):
    n = len(times)
    ones = np.ones((n, 1))
    return Dataset(np.asarray(times, float), np.asarray(events), ones, ones, (INTERCEPT,), (INTERCEPT,))


@pytest.fixture
def frozen_data():
    from frozen_values import EVENTS, TIMES

    return intercept_only(TIMES, EVENTS)


@pytest.fixture(scope="session")
def covariate_data():
    """n = 80 with one binary and one normal covariate in both parts."""
    covs = (Covariate("trt", "binary", 0.5), Covariate("age", "normal", 1.0))
    d, _ = simulate(80, [-1.0, 0.5, 0.3], [0.0, -0.4, 0.2], 1.2, censoring=Censoring(admin=4.0),
                    covariates=covs, incidence=("trt", "age"), latency=("trt", "age"), seed=11)
    return d
