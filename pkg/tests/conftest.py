import random

import pytest


@pytest.fixture
def rng():
    return random.Random(20240811)


def rand_tensor(shape, rng, lo=-1.0, hi=1.0, requires_grad=False):
    from array import array

    from dsta.tensor import Tensor

    n = 1
    for s in shape:
        n *= s
    data = array("d", [rng.uniform(lo, hi) for _ in range(n)])
    return Tensor(shape, data, requires_grad=requires_grad)
