import numpy as np
import pytest

from videdit import tensor as T


@pytest.fixture(autouse=True)
def fresh_tape():
    T.clear_tape()
    yield
    T.clear_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(arr, requires_grad=True):
    return T.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)
