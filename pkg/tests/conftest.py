import warnings

import numpy as np
import pytest

from mspg import discrete, interpolation, mesh, problems


def setup(problem, lc, lf):
    hier = mesh.build_hierarchy(problem.domain, lc, lf)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", discrete.ResolutionWarning)
        fs = discrete.discretize(problem, hier)
    interp = interpolation.build_interpolator(hier, fs.dirichlet_coarse)
    return fs, interp


@pytest.fixture(scope="session")
def checker_small():
    """Checkerboard diffusion, H = 2^-2, h = 2^-5 (coefficient grid 2^-5)."""
    return setup(problems.random_checkerboard(7, grid_level=5), 2, 5)


@pytest.fixture(scope="session")
def helm1d_small():
    return setup(problems.helmholtz_1d(8.0), 4, 8)


@pytest.fixture(scope="session")
def scatter_small():
    return setup(problems.scattering_2d(4.0), 2, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
