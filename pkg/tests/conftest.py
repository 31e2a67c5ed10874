import numpy as np
import pytest

from ctnet import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(a):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)
