"""Fine-scale discretization of a model problem on a mesh hierarchy."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import assembly as asm
from .mesh import DIRICHLET, MeshHierarchy
from .problems import DIFFUSION, HELMHOLTZ, ProblemSpec

PRIMAL = "PRIMAL"
ADJOINT = "ADJOINT"


class ResolutionWarning(UserWarning):
    pass


@dataclass(eq=False)
class FineSystem:
    """Operator ``K[i, j] = a(l_j, l_i)`` on the fine mesh plus data.

    ``local`` holds per-fine-element matrices, ``robin_local`` per Robin facet,
    so that restrictions ``a_T`` to a coarse element can be formed cheaply.
    """

    problem: ProblemSpec
    hierarchy: MeshHierarchy
    K: sp.csr_matrix
    mass: sp.csr_matrix
    load: np.ndarray
    coef: np.ndarray
    local: np.ndarray
    robin_facets: np.ndarray
    robin_local: np.ndarray
    dirichlet_fine: np.ndarray
    dirichlet_coarse: np.ndarray

    @property
    def is_complex(self) -> bool:
        return self.problem.kind == HELMHOLTZ

    @property
    def orientation(self) -> str:
        return ADJOINT if self.is_complex else PRIMAL

    @property
    def dtype(self):
        return complex if self.is_complex else float

    @cached_property
    def dirichlet_mask(self) -> np.ndarray:
        mask = np.zeros(self.hierarchy.fine.n_nodes, dtype=bool)
        mask[self.dirichlet_fine] = True
        return mask

    @cached_property
    def coarse_free(self) -> np.ndarray:
        mask = np.ones(self.hierarchy.coarse.n_nodes, dtype=bool)
        mask[self.dirichlet_coarse] = False
        return np.flatnonzero(mask)

    @cached_property
    def prolongation(self) -> sp.csr_matrix:
        return asm.prolongation(self.hierarchy)

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        """Unit-coefficient stiffness, the Gram matrix of the gradient seminorm."""
        return asm.assemble_stiffness(self.hierarchy.fine)

    @cached_property
    def robin_parent(self) -> np.ndarray:
        fine = self.hierarchy.fine
        return self.hierarchy.parent[fine.facet_elements[self.robin_facets]]

    @cached_property
    def robin_by_coarse(self) -> list[np.ndarray]:
        order = np.argsort(self.robin_parent, kind="stable")
        counts = np.bincount(self.robin_parent, minlength=self.hierarchy.coarse.n_elements)
        return np.split(order, np.cumsum(counts)[:-1])

    def v_gram(self) -> sp.csr_matrix:
        """Gram matrix of the V-norm: gradient seminorm for diffusion,
        ``kappa^2 |.|_L2^2 + |grad .|^2`` for Helmholtz."""
        if self.is_complex:
            return (self.stiffness + self.problem.kappa**2 * self.mass).tocsr()
        return self.stiffness

    def dirichlet_values_fine(self) -> np.ndarray:
        g = np.zeros(self.hierarchy.fine.n_nodes, dtype=self.dtype)
        if self.problem.dirichlet_data is not None and len(self.dirichlet_fine):
            g[self.dirichlet_fine] = self.problem.dirichlet_data(
                self.hierarchy.fine.nodes[self.dirichlet_fine])
        return g

    def dirichlet_values_coarse(self) -> np.ndarray:
        g = np.zeros(self.hierarchy.coarse.n_nodes, dtype=self.dtype)
        if self.problem.dirichlet_data is not None and len(self.dirichlet_coarse):
            g[self.dirichlet_coarse] = self.problem.dirichlet_data(
                self.hierarchy.coarse.nodes[self.dirichlet_coarse])
        return g

    def element_operator(self, T: int) -> tuple[np.ndarray, np.ndarray]:
        """Local nodes and dense matrix of ``a_T`` (restriction to coarse element T)."""
        h = self.hierarchy
        els = h.children[T]
        conn = h.fine.elements[els]
        nodes, inv = np.unique(conn, return_inverse=True)
        inv = inv.reshape(conn.shape)
        n = len(nodes)
        A = np.zeros((n, n), dtype=self.local.dtype)
        k = conn.shape[1]
        for a in range(k):
            for b in range(k):
                np.add.at(A, (inv[:, a], inv[:, b]), self.local[els, a, b])
        rf = self.robin_by_coarse[T] if len(self.robin_facets) else np.array([], dtype=int)
        if len(rf):
            fconn = h.fine.facets[self.robin_facets[rf]]
            pos = np.searchsorted(nodes, fconn)
            kk = fconn.shape[1]
            for a in range(kk):
                for b in range(kk):
                    np.add.at(A, (pos[:, a], pos[:, b]), self.robin_local[rf, a, b])
        return nodes, A


def discretize(problem: ProblemSpec, hierarchy: MeshHierarchy, c_res: float = 1.0) -> FineSystem:
    fine = hierarchy.fine
    if fine.dim != problem.domain.dim:
        raise ValueError("problem and mesh dimensions differ")
    dir_f = fine.boundary_nodes(DIRICHLET)
    dir_c = hierarchy.coarse.boundary_nodes(DIRICHLET)
    M = asm.assemble_mass(fine)
    if problem.kind == DIFFUSION:
        coef = problem.sample_coefficient(fine)
        local = asm.local_stiffness(fine, asm.check_coefficient(coef))
        K = asm._assemble(fine.elements, local, fine.n_nodes)
        rf = np.array([], dtype=np.int64)
        rl = np.zeros((0, fine.dim, fine.dim))
    else:
        kappa = problem.kappa
        if hierarchy.H * kappa > c_res:
            warnings.warn(f"H*kappa = {hierarchy.H * kappa:g} exceeds c_res = {c_res:g}; "
                          "corrector problems may lose coercivity", ResolutionWarning, stacklevel=2)
        coef = np.ones(fine.n_elements)
        local = (asm.local_stiffness(fine) - kappa**2 * asm.local_mass(fine)).astype(complex)
        rf = asm.robin_facets(fine)
        rl = -1j * problem.robin_sign * kappa * asm.local_robin_mass(fine, rf)
        K = asm._assemble(fine.elements, local, fine.n_nodes)
        if len(rf):
            K = (K + asm._assemble(fine.facets[rf], rl, fine.n_nodes)).tocsr()
            K.sort_indices()
    load = asm.assemble_load(fine, problem.rhs).astype(complex if problem.kind == HELMHOLTZ else float)
    return FineSystem(problem, hierarchy, K, M, load, coef, local, rf, rl, dir_f, dir_c)
