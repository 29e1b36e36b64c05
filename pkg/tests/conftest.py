import numpy as np
import pytest

from nlhomog.model import KernelSpec, Medium


def sin_mu(x):
    return 1.0 + 0.5 * np.sin(2.0 * np.pi * x)


def one(*xs):
    return np.ones_like(xs[0])


@pytest.fixture(scope="session")
def sin_medium_1d():
    """d=1 demo medium: lambda = 1, mu = 1 + sin/2, gaussian sigma=0.3."""
    return Medium(kernel=KernelSpec.gaussian(0.3, dim=1), lam=one, mu=sin_mu)


@pytest.fixture(scope="session")
def const_medium_1d():
    """Constant-coefficient medium with the unit gaussian kernel."""
    return Medium(kernel=KernelSpec.gaussian(1.0, dim=1), lam=one, mu=one)


@pytest.fixture(scope="session")
def sin_medium_2d():
    return Medium(
        kernel=KernelSpec.gaussian(0.3, dim=2),
        lam=one,
        mu=lambda x1, x2: 1.0 + 0.5 * np.sin(2.0 * np.pi * x1),
    )


@pytest.fixture(scope="session")
def sin_cell_128(sin_medium_1d):
    from nlhomog.cell import solve_cell_problem

    return solve_cell_problem(sin_medium_1d, n=128)
