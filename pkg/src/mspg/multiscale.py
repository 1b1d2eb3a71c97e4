"""Coarse Petrov-Galerkin systems and the standard Galerkin comparators.

Rows are indexed by test functions, columns by trial functions:
``M[i, j] = a(lambda_j, Lambda_i) = Lambda_i^H K P lambda_j``, and the
right-hand side is ``b[i] = Lambda_i^H (F - K P g_H)`` with ``g_H`` the coarse
nodal interpolant of the Dirichlet data.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import assembly as asm
from .correctors import CorrectorError, CorrectorSet
from .discrete import FineSystem

DENSE_LIMIT = 3000


class CoarseSolveError(RuntimeError):
    def __init__(self, msg: str, min_pivot: float = float("nan")):
        super().__init__(msg)
        self.min_pivot = min_pivot


@dataclass(eq=False)
class CoarseSystem:
    matrix: np.ndarray | sp.spmatrix
    rhs: np.ndarray
    free: np.ndarray  # coarse node per row/column
    lifting: np.ndarray  # full coarse vector with Dirichlet values
    test: sp.spmatrix | None = None  # fine x coarse-free test functions

    @property
    def n(self) -> int:
        return len(self.free)

    def expand(self, u_free: np.ndarray) -> np.ndarray:
        out = self.lifting.astype(np.result_type(self.lifting, u_free)).copy()
        out[self.free] = u_free
        return out


def assemble_coarse(fs: FineSystem, correctors: CorrectorSet | None) -> CoarseSystem:
    """Coarse system with test functions ``P lambda_i + phi_i``.

    ``correctors=None`` gives the plain Galerkin system on the coarse space.
    """
    P = fs.prolongation
    P_free = P[:, fs.coarse_free].tocsc()
    if correctors is None:
        test = P_free.astype(fs.dtype)
    else:
        if correctors.phi.shape != P_free.shape or not np.array_equal(correctors.free, fs.coarse_free):
            raise CorrectorError("corrector set does not match the coarse free nodes")
        test = (P_free + correctors.phi).tocsc()
    g_H = fs.dirichlet_values_coarse()
    testH = test.conj().T.tocsr()
    M = (testH @ (fs.K @ P_free)).tocsr()
    b = testH @ (fs.load - fs.K @ (P @ g_H))
    return CoarseSystem(M, np.asarray(b).ravel(), fs.coarse_free, g_H, test)


def solve_coarse(system: CoarseSystem, tol: float = 1e-12) -> np.ndarray:
    """Solve the coarse system, returning the full coarse nodal vector."""
    n = system.n
    if n == 0:
        return system.lifting.copy()
    b = system.rhs
    if n <= DENSE_LIMIT:
        A = system.matrix.toarray() if sp.issparse(system.matrix) else np.asarray(system.matrix)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)  # reported via the pivot check
            lu, piv = sla.lu_factor(A, check_finite=True)
        pivots = np.abs(np.diag(lu))
        min_pivot = float(pivots.min())
        if min_pivot <= np.finfo(float).eps * max(pivots.max(), 1e-300) * n:
            raise CoarseSolveError(f"coarse system is singular (smallest pivot {min_pivot:.3e})",
                                   min_pivot)
        x = sla.lu_solve((lu, piv), b)
        x = x + sla.lu_solve((lu, piv), b - A @ x)
        res = np.linalg.norm(A @ x - b) / max(np.linalg.norm(b), 1e-300)
    else:
        A = sp.csc_matrix(system.matrix)
        try:
            lu = spla.splu(A)
        except RuntimeError as exc:
            raise CoarseSolveError(f"coarse system is singular: {exc}") from exc
        min_pivot = float(np.abs(lu.U.diagonal()).min())
        x = lu.solve(b)
        x = x + lu.solve(b - A @ x)
        res = np.linalg.norm(A @ x - b) / max(np.linalg.norm(b), 1e-300)
    if np.linalg.norm(b) > 0 and res > tol:
        raise CoarseSolveError(f"coarse residual {res:.2e} exceeds {tol:g} "
                               f"(smallest pivot {min_pivot:.3e})", min_pivot)
    return system.expand(x)


def reference_solution(fs: FineSystem) -> np.ndarray:
    """Standard Galerkin solution on the fine mesh (the reference ``u_h``)."""
    g = fs.dirichlet_values_fine()
    K = fs.K
    if fs.is_complex:
        K = K.astype(complex)
    A, b, lift = asm.constrain_dirichlet(K, fs.load, fs.dirichlet_fine, g[fs.dirichlet_fine])
    try:
        x = asm.solve(A, b, method="lu", tol=1e-12, backward=True)
    except asm.SolverError as exc:
        raise CoarseSolveError(f"fine reference solve failed: {exc}") from exc
    return lift.expand(x)


def standard_fem(fs: FineSystem, level: str = "coarse") -> np.ndarray:
    """Galerkin P1 solution on the coarse mesh (exact integration of the fine
    data, i.e. ``P^T K P``) or on the fine mesh."""
    if level == "fine":
        return reference_solution(fs)
    if level != "coarse":
        raise ValueError("level must be 'coarse' or 'fine'")
    return solve_coarse(assemble_coarse(fs, None))


def multiscale_solution(fs: FineSystem, correctors: CorrectorSet) -> tuple[np.ndarray, CoarseSystem]:
    system = assemble_coarse(fs, correctors)
    return solve_coarse(system), system


def asymmetry(system: CoarseSystem) -> float:
    """``|M - M^T|_max / |M|_max`` (non-conjugated transpose)."""
    M = system.matrix.toarray() if sp.issparse(system.matrix) else np.asarray(system.matrix)
    scale = np.abs(M).max()
    return float(np.abs(M - M.T).max() / scale) if scale > 0 else 0.0
