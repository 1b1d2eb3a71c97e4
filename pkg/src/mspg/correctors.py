"""Fine-scale correctors on element patches and the corrected test basis.

Each element corrector solves a saddle point problem on its patch::

    [ A_p  C^T ] [phi]   [-r_T]
    [ C    0   ] [ mu] = [  0 ]

where ``A_p`` is the fine operator on the patch unknowns (conjugate transposed
for the ADJOINT orientation), ``C`` are the rows of ``I_H`` seeing the patch,
and ``r_T`` is ``a_T`` applied to the coarse hat function.
"""
from __future__ import annotations

import hashlib
import logging
import multiprocessing as mp
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discrete import ADJOINT, FineSystem
from .interpolation import QuasiInterpolator, constraint_rows
from .mesh import element_patch, layers_to_saturate

log = logging.getLogger(__name__)

CODE_VERSION = "mspg-correctors-1"
CACHE_MAGIC = b"MSPGCORR"
CACHE_FORMAT = 1

SADDLE_TOL = 1e-10
KERNEL_TOL = 1e-9


class CorrectorError(RuntimeError):
    pass


class CacheError(RuntimeError):
    pass


class CacheCorruptError(CacheError):
    pass


class CacheVersionError(CacheError):
    pass


@dataclass(eq=False)
class CorrectorSet:
    """Nodal correctors ``phi_z`` as columns of a sparse fine x coarse-free matrix."""

    phi: sp.csc_matrix
    free: np.ndarray  # coarse node per column
    H: float
    h: float
    ell: int | None  # None: ideal (global) correctors
    problem_digest: str = ""
    orientation: str = "PRIMAL"
    pieces: dict | None = field(default=None, repr=False)  # (T, z) -> (indices, values)

    def column(self, z: int) -> int:
        pos = np.searchsorted(self.free, z)
        if pos >= len(self.free) or self.free[pos] != z:
            raise CorrectorError(f"no corrector for coarse node {z}")
        return int(pos)

    def node_corrector(self, z: int) -> np.ndarray:
        return self.phi[:, self.column(z)].toarray().ravel()

    def test_basis(self, P: sp.spmatrix, z: int) -> np.ndarray:
        """``Lambda_z = P lambda_z + phi_z`` as a fine vector."""
        return P[:, [z]].toarray().ravel() + self.node_corrector(z)

    def test_functions(self, P_free: sp.spmatrix) -> sp.csc_matrix:
        return (P_free + self.phi).tocsc()


_CTX: dict = {}
_LU_CACHE: dict = {}


SCHUR_LIMIT = 5_000_000  # entries of the dense A^{-1} C^T block


def _factor_patch(fs: FineSystem, interp: QuasiInterpolator, free_p: np.ndarray, label: str):
    rows, C = constraint_rows(interp, free_p)
    A = fs.K[free_p][:, free_p]
    if fs.orientation == ADJOINT:
        A = A.conj().T
    A = A.tocsc()
    # balance the constraint block against the operator (phi is unaffected)
    C = (C * (abs(A).max() / abs(C).max())).astype(A.dtype).tocsr()
    nC = C.shape[0]
    if len(free_p) * nC <= SCHUR_LIMIT:
        # Schur complement on the multipliers: far cheaper than factoring the
        # saddle matrix, whose dense constraint rows spoil the fill-in
        try:
            luA = spla.splu(A, permc_spec="MMD_AT_PLUS_A")
            Y = luA.solve(C.T.toarray())
            S = sla.lu_factor(C @ Y, check_finite=True)
            if np.all(np.isfinite(Y)) and np.abs(np.diag(S[0])).min() > 0:
                return ("schur", A, C, luA, Y, S)
        except (RuntimeError, sla.LinAlgError, ValueError):
            pass
    M = sp.bmat([[A, C.T], [C, None]], format="csc")
    try:
        lu = spla.splu(M, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise CorrectorError(f"singular saddle system on {label}: {exc}") from exc
    return ("saddle", A, C, lu, None, None)


def _apply(fact, b):
    kind, A, C, lu, Y, S = fact
    n = A.shape[0]
    if kind == "saddle":
        x = lu.solve(b)
        return x[:n], x[n:]
    x0 = lu.solve(b[:n])
    mu = sla.lu_solve(S, C @ x0 - b[n:])
    return x0 - Y @ mu, mu


def _saddle_solve(fs: FineSystem, interp: QuasiInterpolator, free_p: np.ndarray,
                  rhs: np.ndarray, key, label: str) -> np.ndarray:
    """Solve the patch saddle system for several right-hand sides (columns)."""
    cached = _LU_CACHE.get("entry")
    if cached is not None and cached[0] == key:
        fact = cached[1]
    else:
        _LU_CACHE.clear()
        fact = _factor_patch(fs, interp, free_p, label)
        _LU_CACHE["entry"] = (key, fact)
    A, C = fact[1], fact[2]
    n, nC = A.shape[0], C.shape[0]
    b = np.zeros((n + nC, rhs.shape[1]), dtype=np.result_type(A.dtype, rhs.dtype))
    b[:n] = rhs

    def residual(phi, mu):
        return b - np.vstack([A @ phi + C.T @ mu, C @ phi])

    phi, mu = _apply(fact, b)
    d_phi, d_mu = _apply(fact, residual(phi, mu))
    phi, mu = phi + d_phi, mu + d_mu
    r = residual(phi, mu)
    nb = np.linalg.norm(b, axis=0)
    rel = np.linalg.norm(r, axis=0) / np.where(nb > 0, nb, 1.0)
    if np.any(rel > SADDLE_TOL):
        raise CorrectorError(f"saddle residual {rel.max():.2e} on {label} exceeds {SADDLE_TOL:g}")
    if not np.all(np.isfinite(phi)):
        raise CorrectorError(f"non-finite corrector on {label} (degenerate patch)")
    return phi


def _element_job(T: int):
    fs: FineSystem = _CTX["fs"]
    interp: QuasiInterpolator = _CTX["interp"]
    ell: int = _CTX["ell"]
    h = fs.hierarchy
    patch = element_patch(h, T, ell)
    free_p = patch.free_nodes(fs.dirichlet_mask)
    verts = h.coarse.elements[T]
    cols = np.searchsorted(fs.coarse_free, verts)
    cols = np.minimum(cols, len(fs.coarse_free) - 1)
    is_free = fs.coarse_free[cols] == verts
    if not np.any(is_free):
        return T, []
    nodes, KT = fs.element_operator(T)
    if fs.orientation == ADJOINT:
        KT = KT.conj().T
    lam = interp.P[nodes][:, verts[is_free]].toarray()
    local = -(KT @ lam)
    pos = np.searchsorted(free_p, nodes)
    pos = np.minimum(pos, len(free_p) - 1)
    keep = free_p[pos] == nodes
    rhs = np.zeros((len(free_p), lam.shape[1]), dtype=local.dtype)
    rhs[pos[keep]] = local[keep]
    key = patch.coarse_elements.tobytes()
    x = _saddle_solve(fs, interp, free_p, rhs, key, f"patch of coarse element {T} (ell={ell})")
    out = [(int(c), free_p, x[:, k]) for k, c in enumerate(cols[is_free])]
    return T, out


def element_corrector(fs: FineSystem, interp: QuasiInterpolator, T: int, z: int,
                      ell: int | None) -> np.ndarray:
    """``phi_{z,ell,T}`` as a dense fine vector."""
    if z not in fs.hierarchy.coarse.elements[T]:
        raise CorrectorError(f"coarse node {z} is not a vertex of element {T}")
    if z not in set(fs.coarse_free.tolist()):
        raise CorrectorError(f"coarse node {z} is constrained")
    ell_eff = layers_to_saturate(fs.hierarchy.coarse) if ell is None else ell
    _CTX.update(fs=fs, interp=interp, ell=ell_eff)
    _LU_CACHE.clear()
    _, pieces = _element_job(T)
    col = int(np.searchsorted(fs.coarse_free, z))
    out = np.zeros(fs.hierarchy.fine.n_nodes, dtype=fs.dtype)
    for c, idx, vals in pieces:
        if c == col:
            out[idx] = vals
    return out


def ideal_corrector(fs: FineSystem, interp: QuasiInterpolator, z: int) -> np.ndarray:
    """Global corrector of the hat function at ``z`` from one saddle solve."""
    n = fs.hierarchy.fine.n_nodes
    free = np.flatnonzero(~fs.dirichlet_mask)
    K = fs.K.conj().T if fs.orientation == ADJOINT else fs.K
    lam = interp.P[:, [z]].toarray()
    rhs = -(K @ lam)[free]
    _LU_CACHE.clear()
    x = _saddle_solve(fs, interp, free, rhs, ("global",), "global patch")
    _LU_CACHE.clear()
    out = np.zeros(n, dtype=fs.dtype)
    out[free] = x[:, 0]
    return out


def compute_correctors(fs: FineSystem, interp: QuasiInterpolator, ell: int | None,
                       workers: int = 1, keep_pieces: bool = False) -> CorrectorSet:
    """All nodal correctors for oversampling ``ell`` (``None``: ideal).

    Element jobs run in a process pool when ``workers > 1``; results are merged
    in element order, so the output does not depend on the worker count.
    """
    h = fs.hierarchy
    ell_eff = layers_to_saturate(h.coarse) if ell is None else int(ell)
    _CTX.update(fs=fs, interp=interp, ell=ell_eff)
    _LU_CACHE.clear()
    elements = range(h.coarse.n_elements)
    if workers > 1 and h.coarse.n_elements > 1:
        ctx = mp.get_context("fork")
        chunk = max(1, h.coarse.n_elements // (4 * workers))
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            results = list(pool.map(_element_job, elements, chunksize=chunk))
    else:
        results = [_element_job(T) for T in elements]
    _LU_CACHE.clear()

    rows, cols, vals = [], [], []
    pieces = {} if keep_pieces else None
    for T, out in results:
        for c, idx, v in out:
            rows.append(idx)
            cols.append(np.full(len(idx), c))
            vals.append(v)
            if keep_pieces:
                pieces[(T, int(fs.coarse_free[c]))] = (idx, v)
    n_fine = h.fine.n_nodes
    if rows:
        phi = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                            shape=(n_fine, len(fs.coarse_free))).tocsc()
        phi.sum_duplicates()
        phi.sort_indices()
    else:
        phi = sp.csc_matrix((n_fine, len(fs.coarse_free)), dtype=fs.dtype)
    cs = CorrectorSet(phi.astype(fs.dtype), fs.coarse_free.copy(), h.H, h.h, ell,
                      fs.problem.digest(), fs.orientation, pieces)
    check_kernel(cs, interp)
    return cs


def node_corrector(pieces: dict, z: int, elements, n_fine: int) -> np.ndarray:
    """Sum the element pieces ``phi_{z,ell,T}`` over the elements ``T`` containing z."""
    dtype = complex if any(np.iscomplexobj(v) for _, v in pieces.values()) else float
    out = np.zeros(n_fine, dtype=dtype)
    for T in elements:
        try:
            idx, v = pieces[(int(T), int(z))]
        except KeyError:
            raise CorrectorError(f"missing element piece for T={T}, z={z}") from None
        out[idx] += v
    return out


def check_kernel(cs: CorrectorSet, interp: QuasiInterpolator) -> float:
    """Worst ``|I_H phi|_max / max(1, |phi|_max)`` over all columns."""
    if cs.phi.nnz == 0:
        return 0.0
    ih = interp.matrix @ cs.phi
    ih = sp.csc_matrix(ih)
    worst = 0.0
    for j in range(cs.phi.shape[1]):
        a = cs.phi.data[cs.phi.indptr[j]:cs.phi.indptr[j + 1]]
        b = ih.data[ih.indptr[j]:ih.indptr[j + 1]]
        if len(b):
            ratio = np.abs(b).max() / max(1.0, np.abs(a).max() if len(a) else 0.0)
            worst = max(worst, ratio)
    if worst > KERNEL_TOL:
        raise CorrectorError(f"kernel constraint violated: |I_H phi| = {worst:.2e}")
    return worst


# --- cache ----------------------------------------------------------------------

def cache_key(fs: FineSystem, ell: int | None, version: str = CODE_VERSION) -> str:
    h = fs.hierarchy
    payload = b"|".join([
        f"{h.coarse.level}:{h.fine.level}:{ell}".encode(),
        fs.problem.to_bytes(), fs.orientation.encode(), version.encode()])
    return hashlib.sha256(payload).hexdigest()


def _encode(cs: CorrectorSet, key: str) -> bytes:
    phi = cs.phi.tocsc()
    cplx = np.iscomplexobj(phi.data)
    meta = f"{float(cs.H)!r};{float(cs.h)!r};{cs.ell};{cs.problem_digest};{cs.orientation}".encode()
    parts = [CACHE_MAGIC, struct.pack("<I", CACHE_FORMAT), bytes.fromhex(key),
             struct.pack("<BQQI", int(cplx), phi.shape[0], phi.shape[1], len(meta)), meta]
    for j in range(phi.shape[1]):
        lo, hi = phi.indptr[j], phi.indptr[j + 1]
        idx = phi.indices[lo:hi].astype("<i8")
        v = phi.data[lo:hi]
        vbytes = (np.column_stack([v.real, v.imag]).astype("<f8") if cplx else v.astype("<f8")).tobytes()
        parts += [struct.pack("<qQ", int(cs.free[j]), hi - lo), idx.tobytes(), vbytes]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def _decode(data: bytes, key: str | None = None) -> CorrectorSet:
    if len(data) < len(CACHE_MAGIC) + 4 + 32 + 32 or data[:len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise CacheCorruptError("not a corrector cache file")
    body, check = data[:-32], data[-32:]
    off = len(CACHE_MAGIC)
    (fmt,) = struct.unpack_from("<I", data, off)
    if fmt != CACHE_FORMAT:
        raise CacheVersionError(f"cache format {fmt} != {CACHE_FORMAT}")
    if hashlib.sha256(body).digest() != check:
        raise CacheCorruptError("checksum mismatch (truncated or corrupted cache file)")
    off += 4
    stored_key = body[off:off + 32].hex()
    off += 32
    if key is not None and stored_key != key:
        raise CacheVersionError("cache key mismatch")
    cplx, nrows, ncols, mlen = struct.unpack_from("<BQQI", body, off)
    off += struct.calcsize("<BQQI")
    H, hh, ell, digest, orient = body[off:off + mlen].decode().split(";")
    off += mlen
    free = np.empty(ncols, dtype=np.int64)
    indptr = np.zeros(ncols + 1, dtype=np.int64)
    idx_parts, val_parts = [], []
    width = 16 if cplx else 8
    for j in range(ncols):
        node, cnt = struct.unpack_from("<qQ", body, off)
        off += 16
        free[j] = node
        idx_parts.append(np.frombuffer(body, "<i8", cnt, off))
        off += 8 * cnt
        raw = np.frombuffer(body, "<f8", cnt * width // 8, off)
        off += cnt * width
        val_parts.append(raw[0::2] + 1j * raw[1::2] if cplx else raw.copy())
        indptr[j + 1] = indptr[j] + cnt
    if off != len(body):
        raise CacheCorruptError("trailing bytes in cache file")
    data_arr = np.concatenate(val_parts) if val_parts else np.zeros(0, complex if cplx else float)
    ind_arr = np.concatenate(idx_parts).astype(np.int64) if idx_parts else np.zeros(0, np.int64)
    phi = sp.csc_matrix((data_arr, ind_arr, indptr), shape=(nrows, ncols))
    return CorrectorSet(phi, free, float(H), float(hh), None if ell == "None" else int(ell),
                        digest, orient)


def cache_path(cache_dir: str, key: str) -> str:
    return os.path.join(cache_dir, f"{key}.mspgc")


def corrector_cache_store(cs: CorrectorSet, cache_dir: str, key: str) -> str:
    """Write atomically (temp file plus rename); I/O failures become :class:`CacheError`."""
    path = cache_path(cache_dir, key)
    tmp = path + f".tmp{os.getpid()}"
    try:
        os.makedirs(cache_dir, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(_encode(cs, key))
        os.replace(tmp, path)
    except OSError as exc:
        raise CacheError(f"cannot write cache directory {cache_dir!r}: {exc}") from exc
    return path


def corrector_cache_load(cache_dir: str, key: str) -> CorrectorSet | None:
    """Load a cached set; ``None`` on a miss. Stale versions are removed and
    reported as a miss; corrupted files raise :class:`CacheCorruptError`."""
    path = cache_path(cache_dir, key)
    if not os.path.exists(path):
        return None
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return _decode(data, key)
    except CacheVersionError as exc:
        log.warning("invalidating stale corrector cache %s: %s", path, exc)
        os.remove(path)
        return None


def cached_correctors(fs: FineSystem, interp: QuasiInterpolator, ell: int | None,
                      cache_dir: str | None = None, workers: int = 1) -> CorrectorSet:
    if cache_dir is None:
        return compute_correctors(fs, interp, ell, workers)
    key = cache_key(fs, ell)
    try:
        cs = corrector_cache_load(cache_dir, key)
    except CacheCorruptError as exc:
        log.warning("corrector cache %s is corrupted (%s); recomputing", cache_path(cache_dir, key), exc)
        cs = None
    if cs is not None:
        return cs
    cs = compute_correctors(fs, interp, ell, workers)
    corrector_cache_store(cs, cache_dir, key)
    return cs
