import numpy as np
import pytest

from nersae.data import SurveyDataset, load_corn


@pytest.fixture(scope="session")
def corn():
    return load_corn()


@pytest.fixture(scope="session")
def corn_reduced():
    return load_corn(reduced=True)


def make_synthetic(m=5, n_i=3, p=2, seed=0, beta=(1.0, 1.0), sv2=1.0, se2=1.0, N=50):
    """Small NER dataset drawn from the normal model."""
    g = np.random.default_rng(seed)
    area = np.repeat(np.arange(m), n_i)
    X = np.column_stack([np.ones(m * n_i), g.normal(1.0, 1.0, (m * n_i, p - 1))])
    v = g.normal(0.0, np.sqrt(sv2), m)
    y = X @ np.asarray(beta[:p]) + v[area] + g.normal(0.0, np.sqrt(se2), m * n_i)
    xbar = np.column_stack([np.ones(m), g.normal(1.0, 0.3, (m, p - 1))])
    unit = np.tile(np.arange(1, n_i + 1), m)
    return SurveyDataset(y, X, area, unit, np.full(m, N), xbar)


@pytest.fixture
def synthetic():
    return make_synthetic
