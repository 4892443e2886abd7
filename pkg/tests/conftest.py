import numpy as np
import pytest

from hetforest.data import CATEGORICAL, Covariate, CovariateSchema, Dataset


def make_dataset(n=200, p=4, seed=0, effect=None, binary_cols=(), discrete_cols=()):
    """Random continuous design with optional 0/1 and few-valued columns."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, p))
    for j in binary_cols:
        x[:, j] = rng.integers(0, 2, n)
    for j in discrete_cols:
        x[:, j] = rng.integers(0, 4, n)
    d = rng.integers(0, 2, n)
    tau = np.zeros(n) if effect is None else effect(x)
    y = x[:, 0] + tau * d + rng.normal(size=n)
    schema = CovariateSchema.continuous([f"x{j}" for j in range(p)])
    return Dataset(schema, x, y, d)


@pytest.fixture
def mixed_schema():
    return CovariateSchema((Covariate("age"), Covariate("tenure", CATEGORICAL, ("own", "rent", "other"))))


@pytest.fixture
def small_data():
    return make_dataset(n=200, p=4, seed=1, effect=lambda x: (x[:, 1] > 0).astype(float))
