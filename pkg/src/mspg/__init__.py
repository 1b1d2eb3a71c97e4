"""Multiscale Petrov-Galerkin finite elements with localized correctors.

Typical use::

    from mspg import mesh, problems, discrete, interpolation, correctors, multiscale

    prob = problems.random_checkerboard(seed=7)
    hier = mesh.build_hierarchy(prob.domain, 3, 8)
    fs = discrete.discretize(prob, hier)
    interp = interpolation.build_interpolator(hier, fs.dirichlet_coarse)
    cs = correctors.compute_correctors(fs, interp, ell=2)
    u_H, system = multiscale.multiscale_solution(fs, cs)
"""
from .mesh import MeshHierarchy, build_hierarchy, build_mesh
from .problems import ProblemSpec
from .discrete import FineSystem, discretize
from .interpolation import QuasiInterpolator, build_interpolator
from .correctors import CorrectorSet, compute_correctors
from .multiscale import multiscale_solution, reference_solution, standard_fem

__version__ = "0.1.0"

__all__ = [
    "MeshHierarchy", "build_hierarchy", "build_mesh", "ProblemSpec", "FineSystem",
    "discretize", "QuasiInterpolator", "build_interpolator", "CorrectorSet",
    "compute_correctors", "multiscale_solution", "reference_solution", "standard_fem",
]
