"""Quasi-interpolation ``I_H = E_H o Pi_H`` from fine to coarse P1 functions.

``Pi_H`` is the elementwise L2 projection onto discontinuous P1 on the coarse
mesh; ``E_H`` assigns every free coarse vertex the arithmetic mean of the
adjacent elements' values there. Dirichlet vertices are left out of the range.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import local_mass, prolongation
from .mesh import MeshHierarchy, Patch


class InterpolationError(RuntimeError):
    pass


def parent_barycentric(hierarchy: MeshHierarchy) -> np.ndarray:
    """Barycentric coordinates of each fine element's vertices in its parent,
    shape (m_fine, d+1 fine vertices, d+1 coarse vertices)."""
    coarse, fine = hierarchy.coarse, hierarchy.fine
    factor = 2 ** (fine.level - coarse.level)
    verts = coarse.elements[hierarchy.parent]  # (m, d+1)
    vl = (coarse.lattice[verts] * factor).astype(float)  # (m, d+1, d)
    x = fine.lattice[fine.elements].astype(float)  # (m, d+1, d)
    if fine.dim == 1:
        L = vl[:, 1, 0] - vl[:, 0, 0]
        l1 = (x[:, :, 0] - vl[:, 0, 0][:, None]) / L[:, None]
        bary = np.stack([1 - l1, l1], axis=2)
    else:
        B = np.stack([vl[:, 1] - vl[:, 0], vl[:, 2] - vl[:, 0]], axis=2)
        rel = x - vl[:, :1]
        l12 = np.linalg.solve(B[:, None], rel[..., None])[..., 0]
        bary = np.concatenate([1 - l12.sum(axis=2, keepdims=True), l12], axis=2)
    return np.round(bary * factor) / factor


@dataclass(eq=False)
class QuasiInterpolator:
    hierarchy: MeshHierarchy
    matrix: sp.csr_matrix  # (n_coarse_free, n_fine)
    free: np.ndarray  # coarse node index of each row
    dirichlet: np.ndarray

    @cached_property
    def csc(self) -> sp.csc_matrix:
        return self.matrix.tocsc()

    @cached_property
    def P(self) -> sp.csr_matrix:
        return prolongation(self.hierarchy)

    @cached_property
    def P_free(self) -> sp.csr_matrix:
        return self.P[:, self.free].tocsr()

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v

    def full(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros(self.hierarchy.coarse.n_nodes, dtype=np.result_type(v, float))
        out[self.free] = self.matrix @ v
        return out


def build_interpolator(hierarchy: MeshHierarchy, dirichlet_coarse=()) -> QuasiInterpolator:
    coarse, fine = hierarchy.coarse, hierarchy.fine
    k = coarse.dim + 1
    bary = parent_barycentric(hierarchy)  # (m, a, i)
    Me = local_mass(fine)  # (m, a, b)
    Mc_inv = np.linalg.inv(local_mass(coarse))  # (M, j, i)
    moments = np.einsum("mai,mab->mib", bary, Me)  # int_e lambda_i^T * phi_b
    W = np.einsum("mji,mib->mjb", Mc_inv[hierarchy.parent], moments)
    card = coarse.node_valence.astype(float)
    rows = coarse.elements[hierarchy.parent]  # (m, j)
    W = W / card[rows][:, :, None]
    R = np.repeat(rows, k, axis=1).ravel()
    C = np.tile(fine.elements, (1, k)).ravel()
    full = sp.coo_matrix((W.ravel(), (R, C)), shape=(coarse.n_nodes, fine.n_nodes)).tocsr()
    full.sum_duplicates()
    dirichlet = np.unique(np.asarray(dirichlet_coarse, dtype=np.int64))
    mask = np.ones(coarse.n_nodes, dtype=bool)
    mask[dirichlet] = False
    free = np.flatnonzero(mask)
    mat = full[free].tocsr()
    # round-off below this level is structural zero (e.g. from the inverse)
    mat.data[np.abs(mat.data) < 1e-15 * np.abs(mat.data).max()] = 0.0
    mat.eliminate_zeros()
    mat.sort_indices()
    return QuasiInterpolator(hierarchy, mat, free, dirichlet)


def ih_operator_norm(interp: QuasiInterpolator, gram: sp.spmatrix, free_fine: np.ndarray,
                     tol: float = 1e-6, maxiter: int = 2000, seed: int = 0) -> float:
    """Largest generalized singular value of ``v -> P I_H v`` in the ``gram`` metric.

    ``free_fine`` selects the fine nodes on which ``gram`` is SPD (the space V).
    """
    G = sp.csc_matrix(gram)[free_fine][:, free_fine].tocsc()
    B = (interp.P_free @ interp.matrix)[free_fine][:, free_fine].tocsr()
    lu = spla.splu(G)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(G.shape[0])
    v /= np.sqrt(v @ (G @ v))
    sigma2 = 0.0
    for _ in range(maxiter):
        w = lu.solve(B.T @ (G @ (B @ v)))
        new = float(np.sqrt(w @ (G @ w)))  # Rayleigh-type growth in the G metric
        v = w / new
        if abs(new - sigma2) <= tol * new:
            return float(np.sqrt(new))
        sigma2 = new
    raise InterpolationError(f"power iteration did not converge in {maxiter} steps")


def constraint_rows(interp: QuasiInterpolator, patch_free: np.ndarray) -> tuple[np.ndarray, sp.csr_matrix]:
    """Rows of ``I_H`` seeing the patch unknowns, restricted to those columns.

    Returns the row indices (into ``interp.free``) and the constraint block.
    """
    sub = interp.csc[:, patch_free].tocsr()
    rows = np.flatnonzero(np.diff(sub.indptr))
    if len(rows) == 0:
        raise InterpolationError("patch has no interpolation constraints")
    return rows, sub[rows]


def patch_constraints(interp: QuasiInterpolator, patch: Patch, dirichlet_mask) -> tuple[np.ndarray, np.ndarray, sp.csr_matrix]:
    free = patch.free_nodes(dirichlet_mask)
    rows, C = constraint_rows(interp, free)
    return free, rows, C
