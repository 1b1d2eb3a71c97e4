import os

import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp

from mspg import correctors as co
from mspg import problems as pr

from conftest import setup


def _nullspace_corrector(fs, interp, z):
    """Dense oracle: minimize over Ker I_H via an explicit null-space basis."""
    free = np.flatnonzero(~fs.dirichlet_mask)
    K = fs.K.toarray()
    if fs.orientation == "ADJOINT":
        K = K.conj().T
    N = sla.null_space(interp.matrix.toarray()[:, free])
    lam = interp.P[:, [z]].toarray()[:, 0]
    Kf = K[np.ix_(free, free)]
    rhs = -(K @ lam)[free]
    y = np.linalg.solve(N.T @ Kf @ N, N.T @ rhs)
    out = np.zeros(fs.hierarchy.fine.n_nodes, dtype=K.dtype)
    out[free] = N @ y
    return out


@pytest.mark.parametrize("fixture", ["checker_small", "helm1d_small", "scatter_small"])
def test_ideal_corrector_matches_nullspace_oracle(fixture, request):
    fs, interp = request.getfixturevalue(fixture)
    for z in fs.coarse_free[:3]:
        phi = co.ideal_corrector(fs, interp, z)
        assert np.abs(phi - _nullspace_corrector(fs, interp, z)).max() < 1e-10


@pytest.mark.parametrize("fixture", ["checker_small", "helm1d_small"])
def test_saturated_patches_give_ideal_correctors(fixture, request):
    fs, interp = request.getfixturevalue(fixture)
    cs = co.compute_correctors(fs, interp, None)
    for k, z in enumerate(fs.coarse_free):
        assert np.abs(cs.phi[:, k].toarray().ravel() - co.ideal_corrector(fs, interp, z)).max() < 1e-12


def test_kernel_and_test_basis(checker_small):
    fs, interp = checker_small
    cs = co.compute_correctors(fs, interp, 1)
    assert np.abs(interp.matrix @ cs.phi).max() < 1e-12
    Lam = cs.test_functions(interp.P_free)
    assert np.abs((interp.matrix @ Lam).toarray() - np.eye(len(fs.coarse_free))).max() < 1e-12
    z = fs.coarse_free[4]
    e = np.zeros(len(fs.coarse_free)); e[4] = 1
    assert np.allclose(interp(cs.test_basis(fs.prolongation, z)), e)
    assert co.check_kernel(cs, interp) < co.KERNEL_TOL


def test_element_pieces_sum_to_nodal_corrector(checker_small):
    fs, interp = checker_small
    cs = co.compute_correctors(fs, interp, 1, keep_pieces=True)
    h = fs.hierarchy
    for z in fs.coarse_free:
        els = np.flatnonzero((h.coarse.elements == z).any(1))
        total = co.node_corrector(cs.pieces, z, els, h.fine.n_nodes)
        assert np.abs(total - cs.node_corrector(z)).max() < 1e-15
        single = co.element_corrector(fs, interp, els[0], z, 1)
        idx, v = cs.pieces[(int(els[0]), int(z))]
        assert np.abs(single[idx] - v).max() < 1e-14


def test_element_corrector_support(checker_small):
    from mspg.mesh import element_patch
    fs, interp = checker_small
    T, z = 0, fs.hierarchy.coarse.elements[0][1]
    if z not in fs.coarse_free:
        z = [v for v in fs.hierarchy.coarse.elements[0] if v in fs.coarse_free][0]
    phi = co.element_corrector(fs, interp, T, z, 1)
    patch = element_patch(fs.hierarchy, T, 1)
    outside = np.setdiff1d(np.arange(len(phi)), patch.interior_nodes)
    assert np.all(phi[outside] == 0)
    with pytest.raises(co.CorrectorError):
        co.element_corrector(fs, interp, T, 24, 1)


def test_adjoint_orientation_in_helmholtz(helm1d_small):
    fs, interp = helm1d_small
    assert fs.orientation == "ADJOINT"
    z = fs.coarse_free[3]
    phi = co.ideal_corrector(fs, interp, z)
    # a(w, lambda_z + phi_z) = 0 for all w in Ker I_H
    free = np.flatnonzero(~fs.dirichlet_mask)
    N = sla.null_space(interp.matrix.toarray()[:, free])
    Lam = (interp.P[:, [z]].toarray()[:, 0] + phi)[free]
    K = fs.K.toarray()[np.ix_(free, free)]
    assert np.abs(Lam @ K @ N).max() < 1e-10 * np.abs(K).max()


def test_workers_do_not_change_output(checker_small):
    fs, interp = checker_small
    a = co.compute_correctors(fs, interp, 1, workers=1)
    b = co.compute_correctors(fs, interp, 1, workers=2)
    key = co.cache_key(fs, 1)
    assert co._encode(a, key) == co._encode(b, key)


def test_cache_roundtrip_bit_exact(tmp_path, helm1d_small):
    fs, interp = helm1d_small
    cs = co.compute_correctors(fs, interp, 2)
    key = co.cache_key(fs, 2)
    assert co.corrector_cache_load(str(tmp_path), key) is None
    co.corrector_cache_store(cs, str(tmp_path), key)
    back = co.corrector_cache_load(str(tmp_path), key)
    assert back.phi.dtype == cs.phi.dtype
    assert np.array_equal(back.phi.indptr, cs.phi.indptr)
    assert np.array_equal(back.phi.indices, cs.phi.indices)
    assert np.array_equal(back.phi.data.view(np.uint8), cs.phi.data.view(np.uint8))
    assert (back.H, back.h, back.ell, back.orientation) == (cs.H, cs.h, 2, "ADJOINT")
    assert back.problem_digest == fs.problem.digest()


def test_cache_key_sensitivity(checker_small, helm1d_small):
    fs, _ = checker_small
    keys = {co.cache_key(fs, 1), co.cache_key(fs, 2), co.cache_key(fs, None),
            co.cache_key(fs, 1, version="other"), co.cache_key(helm1d_small[0], 1)}
    assert len(keys) == 5


def test_cache_corruption_detected(tmp_path, checker_small, caplog):
    fs, interp = checker_small
    d = str(tmp_path)
    cs = co.cached_correctors(fs, interp, 1, d)
    key = co.cache_key(fs, 1)
    path = co.cache_path(d, key)
    data = bytearray(open(path, "rb").read())
    data[len(data) // 2] ^= 0xFF
    open(path, "wb").write(bytes(data))
    with pytest.raises(co.CacheCorruptError):
        co.corrector_cache_load(d, key)
    open(path, "wb").write(bytes(data[:100]))
    with pytest.raises(co.CacheCorruptError):
        co.corrector_cache_load(d, key)
    again = co.cached_correctors(fs, interp, 1, d)  # recomputes and rewrites
    assert "corrupted" in caplog.text
    assert np.array_equal(again.phi.toarray(), cs.phi.toarray())
    assert co.corrector_cache_load(d, key) is not None


def test_cache_stale_version_removed(tmp_path, checker_small):
    fs, interp = checker_small
    d = str(tmp_path)
    cs = co.compute_correctors(fs, interp, 1)
    key = co.cache_key(fs, 1)
    blob = bytearray(co._encode(cs, key))
    blob[8:12] = (99).to_bytes(4, "little")
    os.makedirs(d, exist_ok=True)
    open(co.cache_path(d, key), "wb").write(bytes(blob))
    assert co.corrector_cache_load(d, key) is None
    assert not os.path.exists(co.cache_path(d, key))
    with pytest.raises(co.CacheVersionError):
        co._decode(co._encode(cs, key), key="00" * 32)
