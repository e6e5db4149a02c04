import numpy as np
import pytest

from uqshift import autodiff as ad


def gradcheck(build, arrays, h=1e-5):
    """Max relative error between backward() and central differences for every array."""
    leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
    build(*leaves).backward()
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        numeric = ad.numerical_gradient(lambda: float(build(*[ad.Tensor(a) for a in arrays]).data), arr, h)
        worst = max(worst, ad.max_relative_error(leaf.grad, numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
