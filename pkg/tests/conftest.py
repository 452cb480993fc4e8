import numpy as np
import pytest

from pidkit import JointPmf


def random_joint(rng: np.random.Generator, dims=(4, 4, 4)) -> JointPmf:
    flat = rng.dirichlet(np.ones(int(np.prod(dims))))
    return JointPmf(flat.reshape(dims))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
