"""P1 assembly on simplicial meshes, prolongation and linear solvers."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import ROBIN, Mesh, MeshHierarchy


class AssemblyError(ValueError):
    pass


class SolverError(RuntimeError):
    def __init__(self, msg: str, residual: float = float("nan"), x=None):
        super().__init__(msg)
        self.residual = residual
        self.x = x


class NotSPDError(SolverError):
    pass


class IllPosedWarning(UserWarning):
    pass


def _gradients(mesh: Mesh) -> np.ndarray:
    """Barycentric gradients per element, shape (m, d+1, d)."""
    p = mesh.nodes[mesh.elements]
    if mesh.dim == 1:
        L = p[:, 1, 0] - p[:, 0, 0]
        g = np.stack([-1.0 / L, 1.0 / L], axis=1)
        return g[:, :, None]
    B = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns are edges
    Binv = np.linalg.inv(B)  # rows: grad lambda_1, grad lambda_2
    g12 = Binv
    g0 = -g12.sum(axis=1, keepdims=True)
    return np.concatenate([g0, g12], axis=1)


def local_stiffness(mesh: Mesh, coef: np.ndarray | float = 1.0) -> np.ndarray:
    """Element stiffness matrices ``coef_e |e| grad(l_a).grad(l_b)``."""
    g = _gradients(mesh)
    gg = np.einsum("mad,mbd->mab", g, g)
    # symmetrize bitwise: the einsum already pairs identical products
    gg = 0.5 * (gg + gg.transpose(0, 2, 1))
    scale = np.broadcast_to(np.asarray(coef, dtype=float), (mesh.n_elements,)) * mesh.volumes
    return gg * scale[:, None, None]


def local_mass(mesh: Mesh) -> np.ndarray:
    k = mesh.dim + 1
    ref = (np.ones((k, k)) + np.eye(k)) / ((k) * (k + 1))
    return mesh.volumes[:, None, None] * ref[None]


def _assemble(elements: np.ndarray, local: np.ndarray, n: int) -> sp.csr_matrix:
    k = elements.shape[1]
    rows = np.repeat(elements, k, axis=1).ravel()
    cols = np.tile(elements, (1, k)).ravel()
    A = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def check_coefficient(coef) -> np.ndarray:
    c = np.asarray(coef, dtype=float)
    if np.any(~np.isfinite(c)) or np.any(c <= 0):
        raise AssemblyError("diffusion coefficient must be strictly positive")
    return c


def assemble_stiffness(mesh: Mesh, coef=1.0) -> sp.csr_matrix:
    """Stiffness matrix of ``int A grad u . grad v`` for elementwise-constant A."""
    coef = check_coefficient(coef)
    return _assemble(mesh.elements, local_stiffness(mesh, coef), mesh.n_nodes)


def assemble_mass(mesh: Mesh) -> sp.csr_matrix:
    return _assemble(mesh.elements, local_mass(mesh), mesh.n_nodes)


def robin_facets(mesh: Mesh) -> np.ndarray:
    return np.flatnonzero(mesh.facet_tags == ROBIN)


def local_robin_mass(mesh: Mesh, facets: np.ndarray) -> np.ndarray:
    if mesh.dim == 1:
        return np.ones((len(facets), 1, 1))
    f = mesh.facets[facets]
    e = np.linalg.norm(mesh.nodes[f[:, 1]] - mesh.nodes[f[:, 0]], axis=1)
    return e[:, None, None] * (np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0)[None]


def assemble_robin_mass(mesh: Mesh, facets: np.ndarray | None = None) -> sp.csr_matrix:
    """Boundary mass ``int_Gamma_R u v`` over the given (default: ROBIN) facets."""
    if facets is None:
        facets = robin_facets(mesh)
    return _assemble(mesh.facets[facets], local_robin_mass(mesh, facets), mesh.n_nodes)


def assemble_load(mesh: Mesh, f) -> np.ndarray:
    """Load vector ``int f v``.

    ``f`` may be a scalar, an array of per-element values, or a callable of
    coordinates (shape (n, d)); callables are interpolated at the nodes and
    integrated exactly against the P1 basis.
    """
    if callable(f):
        fn = np.asarray(f(mesh.nodes))
        fn = np.broadcast_to(fn, (mesh.n_nodes,))
        return assemble_mass(mesh) @ fn
    fe = np.broadcast_to(np.asarray(f), (mesh.n_elements,))
    k = mesh.dim + 1
    w = fe * mesh.volumes / k
    out = np.zeros(mesh.n_nodes, dtype=np.result_type(fe, float))
    np.add.at(out, mesh.elements, np.repeat(w[:, None], k, axis=1))
    return out


def helmholtz_operator(mesh: Mesh, kappa: float, robin_sign: int = 1) -> sp.csr_matrix:
    """``S - kappa^2 M - i*s*kappa R`` with ``s = robin_sign`` (default +1)."""
    if kappa <= 0:
        raise AssemblyError("wave number must be positive")
    facets = robin_facets(mesh)
    if len(facets) == 0:
        warnings.warn("no Robin facets: the Helmholtz problem may be ill-posed",
                      IllPosedWarning, stacklevel=2)
    S = assemble_stiffness(mesh)
    M = assemble_mass(mesh)
    R = assemble_robin_mass(mesh, facets)
    return (S - kappa**2 * M - 1j * robin_sign * kappa * R).tocsr()


def prolongation(hierarchy: MeshHierarchy) -> sp.csr_matrix:
    """Fine-nodes x coarse-nodes matrix interpolating coarse P1 functions."""
    coarse, fine = hierarchy.coarse, hierarchy.fine
    # every fine node is located in the parent of one of its elements
    ne = fine.node_elements.tocsr()
    first_el = ne.indices[ne.indptr[:-1]]
    T = hierarchy.parent[first_el]
    factor = 2 ** (fine.level - coarse.level)
    verts = coarse.elements[T]  # (n, d+1)
    vl = coarse.lattice[verts] * factor  # (n, d+1, d) integer lattice at fine level
    x = fine.lattice  # (n, d)
    if fine.dim == 1:
        L = (vl[:, 1, 0] - vl[:, 0, 0]).astype(float)
        l1 = (x[:, 0] - vl[:, 0, 0]) / L
        bary = np.stack([1 - l1, l1], axis=1)
    else:
        B = np.stack([vl[:, 1] - vl[:, 0], vl[:, 2] - vl[:, 0]], axis=2).astype(float)
        l12 = np.linalg.solve(B, (x - vl[:, 0]).astype(float)[:, :, None])[:, :, 0]
        bary = np.concatenate([1 - l12.sum(axis=1, keepdims=True), l12], axis=1)
    bary = np.round(bary * factor) / factor  # exact dyadic weights
    rows = np.repeat(np.arange(fine.n_nodes), verts.shape[1])
    P = sp.csr_matrix((bary.ravel(), (rows, verts.ravel())),
                      shape=(fine.n_nodes, coarse.n_nodes))
    P.eliminate_zeros()
    P.sort_indices()
    return P


@dataclass
class Lifting:
    """Reconstructs full nodal vectors from free-node solutions."""

    n: int
    free: np.ndarray
    fixed: np.ndarray
    values: np.ndarray

    def expand(self, x_free: np.ndarray) -> np.ndarray:
        dtype = np.result_type(x_free, self.values)
        out = np.zeros(self.n, dtype=dtype)
        out[self.free] = x_free
        out[self.fixed] = self.values
        return out

    def full_values(self) -> np.ndarray:
        out = np.zeros(self.n, dtype=self.values.dtype)
        out[self.fixed] = self.values
        return out


def constrain_dirichlet(op: sp.spmatrix, rhs: np.ndarray, dirichlet: np.ndarray,
                        values: Mapping[int, complex] | np.ndarray | None = None):
    """Eliminate Dirichlet rows/columns.

    ``values`` is either an array aligned with ``dirichlet`` or a mapping
    node -> value (every key must be a Dirichlet node); missing nodes get 0.
    Returns ``(op_free, rhs_free, lifting)``.
    """
    n = op.shape[0]
    dirichlet = np.unique(np.asarray(dirichlet, dtype=np.int64))
    if values is None:
        vals = np.zeros(len(dirichlet))
    elif isinstance(values, Mapping):
        bad = set(values) - set(dirichlet.tolist())
        if bad:
            raise AssemblyError(f"values given for non-Dirichlet nodes {sorted(bad)[:5]}")
        vals = np.zeros(len(dirichlet), dtype=np.result_type(*values.values(), float))
        pos = {int(v): i for i, v in enumerate(dirichlet)}
        for k, v in values.items():
            vals[pos[int(k)]] = v
    else:
        vals = np.asarray(values)
        if vals.shape != dirichlet.shape:
            raise AssemblyError("values must align with the Dirichlet node set")
    mask = np.ones(n, dtype=bool)
    mask[dirichlet] = False
    free = np.flatnonzero(mask)
    lift = Lifting(n, free, dirichlet, vals)
    g = lift.full_values()
    op = sp.csr_matrix(op)
    rhs_full = np.asarray(rhs) - op @ g
    return op[free][:, free], rhs_full[free], lift


def _relres(op, x, rhs) -> float:
    nb = np.linalg.norm(rhs)
    r = np.linalg.norm(op @ x - rhs)
    return r / nb if nb > 0 else r


def _cg(op, rhs, tol, maxiter):
    d = op.diagonal()
    if np.any(np.abs(d.imag) > 0) or np.any(d.real <= 0):
        raise NotSPDError("CG requires a positive diagonal")
    dinv = 1.0 / d.real
    x = np.zeros_like(rhs)
    r = rhs.copy()
    nb = np.linalg.norm(rhs)
    if nb == 0:
        return x
    z = dinv * r
    p = z.copy()
    rz = np.vdot(r, z)
    best = (1.0, x.copy())
    for _ in range(maxiter):
        Ap = op @ p
        curv = np.vdot(p, Ap)
        if curv.real <= 0:
            raise NotSPDError("operator is not positive definite (CG curvature <= 0)")
        alpha = rz / curv
        x = x + alpha * p
        r = r - alpha * Ap
        res = np.linalg.norm(r) / nb
        if res < best[0]:
            best = (res, x.copy())
        if res <= tol:
            return x
        z = dinv * r
        rz_new = np.vdot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"CG did not reach {tol:g} in {maxiter} iterations", best[0], best[1])


def backward_error(op, x, rhs) -> float:
    """Normwise backward error ``|r| / (|op| |x| + |b|)`` in the max norm."""
    r = np.abs(op @ x - rhs).max(initial=0.0)
    scale = spla.norm(op, np.inf) * np.abs(x).max(initial=0.0) + np.abs(rhs).max(initial=0.0)
    return float(r / scale) if scale > 0 else float(r)


def solve(op, rhs, method: str = "lu", tol: float = 1e-10, maxiter: int | None = None,
          backward: bool = False):
    """Solve ``op x = rhs`` to relative residual ``tol``.

    ``method`` is ``"lu"`` (sparse direct), ``"cg"`` (SPD only) or ``"gmres"``.
    With ``backward=True`` the acceptance test uses :func:`backward_error`
    instead, which is the meaningful measure for badly conditioned fine-mesh
    stiffness matrices.
    """
    op = sp.csr_matrix(op)
    rhs = np.asarray(rhs)
    if op.shape[0] != op.shape[1] or op.shape[0] != rhs.shape[0]:
        raise SolverError("shape mismatch")
    if method == "cg":
        if op.nnz and abs(op - op.conj().T).max() > 1e-12 * abs(op).max():
            raise NotSPDError("CG requires a Hermitian operator")
        dtype = np.result_type(op.dtype, rhs.dtype)
        x = _cg(op, rhs.astype(dtype), tol, maxiter or 10 * op.shape[0])
    elif method == "lu":
        dtype = np.result_type(op.dtype, rhs.dtype)
        try:
            lu = spla.splu(op.tocsc().astype(dtype))
        except RuntimeError as exc:
            raise SolverError(f"LU factorization failed: {exc}") from exc
        b = rhs.astype(dtype)
        x = lu.solve(b)
        # one step of iterative refinement
        x = x + lu.solve(b - op @ x)
    elif method == "gmres":
        x, info = spla.gmres(op, rhs, rtol=tol, atol=0.0, restart=200,
                             maxiter=maxiter or 50)
        if info != 0:
            raise SolverError("GMRES did not converge", _relres(op, x, rhs), x)
    else:
        raise ValueError(f"unknown solver method {method!r}")
    res = backward_error(op, x, rhs) if backward else _relres(op, x, rhs)
    if res > tol:
        raise SolverError(f"{'backward error' if backward else 'relative residual'} {res:.3e} exceeds {tol:g}", res, x)
    return x


def export_coo(op: sp.spmatrix, fh) -> None:
    """Write ``row col value`` triplets (complex values as ``re im``)."""
    c = sp.coo_matrix(op)
    cplx = np.iscomplexobj(c.data)
    for i, j, v in zip(c.row, c.col, c.data):
        if cplx:
            fh.write(f"{i} {j} {float(v.real)!r} {float(v.imag)!r}\n")
        else:
            fh.write(f"{i} {j} {float(v)!r}\n")


FieldFunction = Callable[[np.ndarray], np.ndarray]
