import numpy as np
import pytest

from fedeca.data import CenterCohort


def random_cohort(rng, n=40, p=3, ties=False, event_rate=0.7, center_id=0):
    """Small random cohort; ``ties`` draws integer times so events collide."""
    X = rng.standard_normal((n, p))
    treated = rng.integers(0, 2, n)
    treated[:2] = [0, 1]
    time = rng.integers(1, max(3, n // 4), n).astype(float) if ties else rng.exponential(1.0, n) + 1e-3
    event = (rng.random(n) < event_rate).astype(int)
    event[0] = 1
    return CenterCohort.from_arrays(X, treated, time, event, center_id=center_id)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
