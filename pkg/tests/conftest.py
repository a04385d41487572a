import pytest

from stochsis.model import ModelParams

BASE = dict(beta=1.0, gamma=20.0, mu=20.0, capacity=100.0)


def make(sigma2=0.0121, i0=50.0, **kw) -> ModelParams:
    args = {**BASE, **kw}
    return ModelParams.from_sigma2(sigma2=sigma2, i0=i0, **args)


@pytest.fixture
def p1() -> ModelParams:
    return make()


@pytest.fixture
def p2() -> ModelParams:
    return make(sigma2=0.02, i0=10.0)
