"""Error norms, best approximations, corrector decay and inf-sup diagnostics.

Errors against a fine reference use the fine mass and V-norm Gram matrices.
For 1D problems with a closed-form solution, :func:`exact_errors_1d` integrates
against the exact solution with Gauss quadrature on the fine elements instead.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .correctors import SADDLE_TOL
from .discrete import FineSystem
from .multiscale import CoarseSystem

CSV_FIELDS = ("problem", "d", "H", "h", "ell", "kappa_or_eps", "seed",
              "err_L2_rel", "err_V_rel", "err_fem_L2_rel", "err_fem_V_rel",
              "err_best_L2_rel", "err_best_V_rel", "infsup", "decay_c",
              "t_correctors_s", "t_solve_s")
TIMING_FIELDS = ("t_correctors_s", "t_solve_s")
NAN = float("nan")


class AnalysisError(ValueError):
    pass


@dataclass
class ErrorReport:
    """One CSV row. Missing quantities are NaN; ``ell=None`` means ideal."""

    problem: str
    d: int
    H: float
    h: float
    ell: int | None = None
    kappa_or_eps: float = NAN
    seed: int | None = None
    err_L2_rel: float = NAN
    err_V_rel: float = NAN
    err_fem_L2_rel: float = NAN
    err_fem_V_rel: float = NAN
    err_best_L2_rel: float = NAN
    err_best_V_rel: float = NAN
    infsup: float = NAN
    decay_c: float = NAN
    t_correctors_s: float = NAN
    t_solve_s: float = NAN

    def __post_init__(self):
        for f in ("err_L2_rel", "err_V_rel", "err_fem_L2_rel", "err_fem_V_rel",
                  "err_best_L2_rel", "err_best_V_rel"):
            v = getattr(self, f)
            if v < 0:
                raise AnalysisError(f"{f} must be nonnegative, got {v}")

    def row(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            if v is None:
                out[k] = "inf" if k == "ell" else ""
            elif isinstance(v, float):
                out[k] = "nan" if math.isnan(v) else repr(float(v))
            else:
                out[k] = str(v)
        return out


assert tuple(f.name for f in fields(ErrorReport)) == CSV_FIELDS


def write_csv(reports, fh) -> None:
    w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row())


def read_csv(fh) -> list[dict[str, str]]:
    return list(csv.DictReader(fh))


# --- norms ----------------------------------------------------------------------

def _as_fine(fs: FineSystem, u: np.ndarray) -> np.ndarray:
    u = np.asarray(u)
    h = fs.hierarchy
    if u.shape == (h.fine.n_nodes,):
        return u
    if u.shape == (h.coarse.n_nodes,):
        return fs.prolongation @ u
    raise AnalysisError(f"vector of length {u.shape} matches neither mesh "
                        f"({h.coarse.n_nodes} coarse, {h.fine.n_nodes} fine nodes)")


def gram_norm(G: sp.spmatrix, v: np.ndarray) -> float:
    val = np.vdot(v, G @ v).real
    return math.sqrt(max(val, 0.0))


def error_norms(fs: FineSystem, u: np.ndarray, u_ref: np.ndarray) -> tuple[float, float]:
    """Relative (L2, V) errors of ``u`` (coarse or fine nodal vector) against
    the fine reference ``u_ref``."""
    u_ref = np.asarray(u_ref)
    if u_ref.shape != (fs.hierarchy.fine.n_nodes,):
        raise AnalysisError("reference must be a fine nodal vector")
    e = _as_fine(fs, u) - u_ref
    out = []
    for G in (fs.mass, fs.v_gram()):
        den = gram_norm(G, u_ref)
        out.append(gram_norm(G, e) / den if den > 0 else gram_norm(G, e))
    return out[0], out[1]


def best_approximation(fs: FineSystem, u_ref: np.ndarray, norm: str = "L2") -> tuple[float, np.ndarray]:
    """Relative error of the Gram projection of ``u_ref`` onto ``P g_H + V_H``.

    Returns the error and the full coarse nodal vector of the projection.
    """
    G = {"L2": fs.mass, "V": fs.v_gram()}.get(norm)
    if G is None:
        raise AnalysisError("norm must be 'L2' or 'V'")
    P = fs.prolongation
    Pf = P[:, fs.coarse_free].tocsc()
    g = fs.dirichlet_values_coarse()
    r = np.asarray(u_ref) - P @ g
    A = (Pf.T @ G @ Pf).toarray()
    b = Pf.T @ (G @ r)
    c = sla.solve(A, b, assume_a="pos") if len(b) else b
    best = g.astype(np.result_type(g, c)).copy()
    best[fs.coarse_free] = c
    err = error_norms(fs, best, u_ref)
    return (err[0] if norm == "L2" else err[1]), best


# --- exact solutions in 1D ------------------------------------------------------

_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(5)


def _quadrature_1d(mesh):
    a = mesh.nodes[mesh.elements[:, 0], 0]
    b = mesh.nodes[mesh.elements[:, 1], 0]
    L = b - a
    xq = a[:, None] + 0.5 * L[:, None] * (_GAUSS_X[None, :] + 1)
    wq = 0.5 * L[:, None] * _GAUSS_W[None, :]
    lam1 = (xq - a[:, None]) / L[:, None]
    return xq, wq, L, lam1


def exact_errors_1d(fs: FineSystem, u: np.ndarray) -> tuple[float, float]:
    """Relative (L2, V) errors of ``u`` against the closed-form solution."""
    prob = fs.problem
    if fs.hierarchy.dim != 1 or prob.exact is None or prob.exact_grad is None:
        raise AnalysisError("needs a 1D problem with exact solution and gradient")
    mesh = fs.hierarchy.fine
    uf = _as_fine(fs, u)
    xq, wq, L, lam1 = _quadrature_1d(mesh)
    ex = prob.exact(xq[..., None])
    dex = prob.exact_grad(xq[..., None])
    u0, u1 = uf[mesh.elements[:, 0]], uf[mesh.elements[:, 1]]
    uh = u0[:, None] * (1 - lam1) + u1[:, None] * lam1
    duh = ((u1 - u0) / L)[:, None]
    k2 = prob.kappa**2 if fs.is_complex else 0.0
    l2_e = np.sum(wq * np.abs(ex - uh) ** 2)
    l2_u = np.sum(wq * np.abs(ex) ** 2)
    h1_e = np.sum(wq * np.abs(dex - duh) ** 2)
    h1_u = np.sum(wq * np.abs(dex) ** 2)
    return math.sqrt(l2_e / l2_u), math.sqrt((h1_e + k2 * l2_e) / (h1_u + k2 * l2_u))


def exact_best_approximation_1d(fs: FineSystem, norm: str = "V") -> float:
    """Relative error of the best coarse approximation of the exact solution.

    The projection right-hand side ``(u, lambda_i)`` is integrated with Gauss
    quadrature on the fine elements; the coarse Gram matrix is exact.
    """
    prob = fs.problem
    if fs.hierarchy.dim != 1 or prob.exact is None or prob.exact_grad is None:
        raise AnalysisError("needs a 1D problem with exact solution and gradient")
    if norm not in ("L2", "V"):
        raise AnalysisError("norm must be 'L2' or 'V'")
    mesh = fs.hierarchy.fine
    xq, wq, L, lam1 = _quadrature_1d(mesh)
    ex = prob.exact(xq[..., None])
    dex = prob.exact_grad(xq[..., None])
    n = mesh.n_nodes
    # moments against fine hats, then restricted to coarse hats by P^T
    m0 = np.bincount(mesh.elements[:, 0], np.sum(wq * ex * (1 - lam1), 1).real, n) \
        + 1j * np.bincount(mesh.elements[:, 0], np.sum(wq * ex * (1 - lam1), 1).imag, n)
    m1 = np.bincount(mesh.elements[:, 1], np.sum(wq * ex * lam1, 1).real, n) \
        + 1j * np.bincount(mesh.elements[:, 1], np.sum(wq * ex * lam1, 1).imag, n)
    mom_l2 = m0 + m1
    g = np.sum(wq * dex, 1) / L
    mom_h1 = (np.bincount(mesh.elements[:, 1], g.real, n) - np.bincount(mesh.elements[:, 0], g.real, n)) \
        + 1j * (np.bincount(mesh.elements[:, 1], g.imag, n) - np.bincount(mesh.elements[:, 0], g.imag, n))
    k2 = prob.kappa**2 if fs.is_complex else 0.0
    if norm == "L2":
        G, mom = fs.mass, mom_l2
    else:
        G, mom = (fs.stiffness + k2 * fs.mass).tocsr(), mom_h1 + k2 * mom_l2
    P = fs.prolongation
    Pf = P[:, fs.coarse_free].tocsc()
    gH = fs.dirichlet_values_coarse()
    A = (Pf.T @ G @ Pf).toarray()
    b = Pf.T @ mom - Pf.T @ (G @ (P @ gH))
    c = sla.solve(A, b, assume_a="pos")
    best = gH.astype(complex).copy()
    best[fs.coarse_free] = c
    l2, v = exact_errors_1d(fs, best)
    return l2 if norm == "L2" else v


# --- corrector decay ------------------------------------------------------------

@dataclass
class DecayProfile:
    center: int
    H: float
    radii: np.ndarray  # R_k = k H
    tails: np.ndarray  # V-norm of the corrector outside B_{R_k}(z)
    total: float
    slope: float = NAN  # c in tail ~ C exp(-c R/H)
    intercept: float = NAN
    r2: float = NAN
    window: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def layer_ratio(self) -> float:
        return math.exp(-self.slope)


def element_energies(fs: FineSystem, v: np.ndarray) -> np.ndarray:
    """Per fine element ``|v|_V^2`` contributions."""
    from .assembly import local_mass, local_stiffness
    mesh = fs.hierarchy.fine
    loc = local_stiffness(mesh)
    if fs.is_complex:
        loc = loc + fs.problem.kappa**2 * local_mass(mesh)
    ve = np.asarray(v)[mesh.elements]
    return np.einsum("ea,eab,eb->e", ve.conj(), loc, ve).real


def decay_profile(fs: FineSystem, v: np.ndarray, z: int, tol: float = SADDLE_TOL) -> DecayProfile:
    """Tail norms of ``v`` outside balls around coarse node ``z`` and the
    fitted exponential rate."""
    h = fs.hierarchy
    mesh = h.fine
    if np.asarray(v).shape != (mesh.n_nodes,):
        raise AnalysisError("corrector must be a fine nodal vector")
    energy = np.maximum(element_energies(fs, v), 0.0)
    dist = np.linalg.norm(mesh.centroids - h.coarse.nodes[z], axis=1)
    kmax = int(math.ceil(dist.max() / h.H)) + 1
    radii = h.H * np.arange(1, kmax + 1)
    tails = np.array([math.sqrt(energy[dist > R].sum()) for R in radii])
    total = math.sqrt(energy.sum())
    prof = DecayProfile(z, h.H, radii, tails, total)
    window = tails > 1e3 * tol * max(total, 1e-300)
    prof.window = window
    if window.sum() < 3:
        raise AnalysisError(f"only {int(window.sum())} radii above the noise floor; need 3")
    k = radii[window] / h.H
    y = np.log(tails[window])
    A = np.column_stack([k, np.ones_like(k)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    ss = np.sum((y - y.mean()) ** 2)
    prof.slope = float(-coef[0])
    prof.intercept = float(coef[1])
    prof.r2 = float(1 - np.sum((y - pred) ** 2) / ss) if ss > 0 else 1.0
    return prof


def interior_node(fs: FineSystem) -> int:
    """Free coarse node closest to the centroid of the domain's bounding box."""
    c = fs.hierarchy.coarse
    mid = 0.5 * (c.nodes.min(0) + c.nodes.max(0))
    cand = fs.coarse_free
    d = np.linalg.norm(c.nodes[cand] - mid, axis=1)
    return int(cand[np.lexsort((cand, np.round(d, 12)))[0]])


# --- inf-sup --------------------------------------------------------------------

def _chol(G, name):
    G = G.toarray() if sp.issparse(G) else np.asarray(G)
    if G.shape[0] != G.shape[1] or np.abs(G - G.conj().T).max(initial=0) > 1e-10 * np.abs(G).max(initial=1):
        raise AnalysisError(f"{name} Gram matrix is not Hermitian")
    try:
        return sla.cholesky(G, lower=False)
    except sla.LinAlgError:
        raise AnalysisError(f"{name} Gram matrix is not positive definite") from None


def infsup_estimate(M, G_V, G_W) -> float:
    """Smallest generalized singular value of ``M`` (rows: test, columns: trial)
    in the metrics ``G_W`` (test) and ``G_V`` (trial)."""
    M = M.toarray() if sp.issparse(M) else np.asarray(M)
    RV = _chol(G_V, "trial")
    RW = _chol(G_W, "test")
    X = sla.solve_triangular(RW, M, trans="C")  # R_W^{-H} M
    X = sla.solve_triangular(RV, X.conj().T, trans="C").conj().T  # ... R_V^{-1}
    s = sla.svdvals(X)
    return float(s.min()) if len(s) else NAN


def coarse_infsup(fs: FineSystem, system: CoarseSystem, limit: int = 1500) -> float:
    """Discrete inf-sup constant of a coarse system in the V-norm; NaN above
    ``limit`` unknowns (dense decomposition)."""
    if system.n > limit or system.test is None:
        return NAN
    G = fs.v_gram()
    Pf = fs.prolongation[:, system.free].tocsc()
    GV = (Pf.T @ G @ Pf).toarray()
    T = system.test
    GW = (T.conj().T @ G @ T).toarray()
    return infsup_estimate(system.matrix, GV, GW)
