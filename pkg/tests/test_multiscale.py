import numpy as np
import pytest
import scipy.sparse as sp

from mspg import correctors as co
from mspg import multiscale as ms
from mspg import problems as pr

from conftest import setup


@pytest.mark.parametrize("fixture", ["checker_small", "helm1d_small"])
def test_ideal_method_reproduces_interpolant(fixture, request):
    fs, interp = request.getfixturevalue(fixture)
    cs = co.compute_correctors(fs, interp, None)
    u, system = ms.multiscale_solution(fs, cs)
    uh = ms.reference_solution(fs)
    assert np.abs(u[interp.free] - interp(uh)).max() <= 1e-8 * np.abs(uh).max()


def test_ideal_diffusion_matrix_symmetric(checker_small):
    fs, interp = checker_small
    _, system = ms.multiscale_solution(fs, co.compute_correctors(fs, interp, None))
    assert ms.asymmetry(system) < 1e-12


def test_localized_matrix_not_exactly_symmetric(checker_small):
    fs, interp = checker_small
    _, system = ms.multiscale_solution(fs, co.compute_correctors(fs, interp, 1))
    assert 1e-12 < ms.asymmetry(system) < 0.1


def test_standard_fem_is_coarse_galerkin():
    fs, _ = setup(pr.poisson(1), 3, 7)
    u = ms.standard_fem(fs)
    x = fs.hierarchy.coarse.nodes[:, 0]
    assert np.abs(u - x * (1 - x) / 2).max() < 1e-13
    assert np.allclose(ms.standard_fem(fs, "fine"), ms.reference_solution(fs))
    with pytest.raises(ValueError):
        ms.standard_fem(fs, "medium")


def test_dirichlet_lifting_1d_helmholtz(helm1d_small):
    fs, _ = helm1d_small
    u = ms.standard_fem(fs)
    assert u[fs.dirichlet_coarse] == pytest.approx([1.0])


def test_error_decreases_with_oversampling():
    fs, interp = setup(pr.random_checkerboard(7, grid_level=5), 3, 5)
    uh = ms.reference_solution(fs)
    target = interp(uh)
    errs = []
    for ell in (1, 2, None):
        u, _ = ms.multiscale_solution(fs, co.compute_correctors(fs, interp, ell))
        errs.append(np.abs(u[interp.free] - target).max())
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-12


def test_mismatched_correctors_rejected(checker_small, helm1d_small):
    fs, interp = checker_small
    cs = co.compute_correctors(*helm1d_small, 1)
    with pytest.raises(co.CorrectorError):
        ms.assemble_coarse(fs, cs)


def test_singular_coarse_system_reported():
    system = ms.CoarseSystem(sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]])), np.ones(2),
                             np.array([0, 1]), np.zeros(2))
    with pytest.raises(ms.CoarseSolveError) as err:
        ms.solve_coarse(system)
    assert err.value.min_pivot < 1e-12
