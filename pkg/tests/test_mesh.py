import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mspg import mesh as m
from mspg.problems import SCATTERER


@pytest.mark.parametrize("level,nn,ne", [(0, 2, 1), (3, 9, 8), (6, 65, 64)])
def test_interval_counts(level, nn, ne):
    msh = m.build_mesh(m.interval(), level)
    assert (msh.n_nodes, msh.n_elements) == (nn, ne)
    assert np.isclose(msh.volumes.sum(), 1.0)


@pytest.mark.parametrize("level", [1, 2, 4])
def test_square_counts(level):
    n = 2**level
    msh = m.build_mesh(m.square(), level)
    assert msh.n_nodes == (n + 1) ** 2
    assert msh.n_elements == 2 * n * n
    assert len(msh.facets) == 4 * n
    assert np.isclose(msh.volumes.sum(), 1.0)
    assert np.all(msh.volumes > 0)


def test_friedrichs_keller_diagonal():
    msh = m.build_mesh(m.square(), 1)
    # every element has an edge along (1, 1)
    for e in msh.elements:
        p = msh.nodes[e]
        d = [p[j] - p[i] for i in range(3) for j in range(3) if i != j]
        assert any(np.allclose(v, [0.5, 0.5]) for v in d)


def test_hole_removes_coarse_triangles():
    dom = m.square(outer=m.ROBIN, hole=SCATTERER, hole_tag=m.DIRICHLET)
    msh = m.build_mesh(dom, 2)
    assert msh.n_elements == 32 - 4
    assert np.isclose(msh.volumes.sum(), 1 - 0.125)
    hole = msh.nodes[msh.boundary_nodes(m.DIRICHLET)]
    assert len(hole) == 6
    assert len(msh.boundary_nodes(m.ROBIN)) == 16


def test_hole_rejected_when_not_conforming():
    flipped = ((0.25, 0.25), (0.75, 0.25), (0.25, 0.75))  # hypotenuse along (1, -1)
    with pytest.raises(m.MeshError, match="union"):
        m.build_mesh(m.square(hole=flipped), 3)
    with pytest.raises(m.MeshError, match="lattice"):
        m.build_mesh(m.square(hole=SCATTERER), 1)


def test_dump_format():
    msh = m.build_mesh(m.square(), 1)
    buf = io.StringIO()
    msh.dump(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "2 9 8"
    assert len(lines) == 1 + 9 + 8 + 8
    assert lines[-1].endswith("DIRICHLET")
    assert [float(v) for v in lines[1].split()] == list(msh.nodes[0])


def test_adjacency_is_permutation_equivariant(rng):
    msh = m.build_mesh(m.square(), 2)
    n2e, e2e = m.adjacency(msh)
    perm = rng.permutation(msh.n_elements)
    shuffled = m.Mesh(msh.dim, msh.level, msh.nodes, msh.lattice, msh.elements[perm],
                      msh.facets, msh.facet_tags, np.argsort(perm)[msh.facet_elements], msh._lookup)
    n2e_p, e2e_p = m.adjacency(shuffled)
    for a, b in zip(n2e, n2e_p):
        assert sorted(perm[b]) == sorted(a)
    inv = np.argsort(perm)
    for i in range(msh.n_elements):
        assert sorted(perm[e2e_p[inv[i]]]) == sorted(e2e[i])


def test_hierarchy_parents_contain_children():
    h = m.build_hierarchy(m.square(), 2, 5)
    assert all(len(c) == 64 for c in h.children)
    for T in range(h.coarse.n_elements):
        tri = h.coarse.nodes[h.coarse.elements[T]]
        assert np.all(m._in_triangle(h.fine.centroids[h.children[T]], tri))
    assert np.allclose(h.fine.nodes[h.coarse_to_fine_node], h.coarse.nodes)


def test_hierarchy_level_checks():
    with pytest.raises(m.MeshError):
        m.build_hierarchy(m.square(), 3, 2)
    h = m.build_hierarchy(m.interval(), 4, 4)
    assert np.array_equal(h.parent, np.arange(16))


@pytest.mark.parametrize("dom", [m.square(), m.square(hole=SCATTERER), m.interval()])
def test_saturation_reaches_whole_mesh(dom):
    for L in (2, 3):
        c = m.build_mesh(dom, L)
        ell = m.layers_to_saturate(c)
        for T in range(c.n_elements):
            assert len(m.coarse_patch_elements(c, T, ell)) == c.n_elements


def test_patch_layers_grow_and_reject_zero():
    c = m.build_mesh(m.square(), 3)
    sizes = [len(m.coarse_patch_elements(c, 40, ell)) for ell in (1, 2, 3)]
    assert sizes[0] < sizes[1] < sizes[2]
    with pytest.raises(m.MeshError):
        m.coarse_patch_elements(c, 0, 0)


def test_patch_nodes():
    h = m.build_hierarchy(m.square(), 2, 4)
    p = m.element_patch(h, 10, 1)
    assert not p.saturated
    assert set(p.artificial_nodes).isdisjoint(p.interior_nodes)
    assert len(p.artificial_nodes) + len(p.interior_nodes) == len(p.fine_nodes)
    full = m.element_patch(h, 10, m.layers_to_saturate(h.coarse))
    assert full.saturated and len(full.interior_nodes) == h.fine.n_nodes
    assert set(full.true_node_tags) == {m.DIRICHLET}


def test_parse_levels():
    assert m.parse_levels("1..4") == [1, 2, 3, 4]
    assert m.parse_levels("5,6") == [5, 6]
    assert m.parse_levels("1..2,7") == [1, 2, 7]


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2))
def test_hierarchy_volumes(lc, extra):
    h = m.build_hierarchy(m.square(), lc, lc + extra)
    vol = np.bincount(h.parent, h.fine.volumes, h.coarse.n_elements)
    assert np.allclose(vol, h.coarse.volumes)
