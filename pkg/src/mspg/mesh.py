"""Structured simplicial meshes, nested hierarchies and element patches.

Meshes live on the unit interval or the unit square. Squares are split into
Friedrichs-Keller triangles (diagonal from (x, y) to (x+h, y+h)), so uniform
refinement nests exactly. A triangular hole can be cut out of the square as
long as it is a union of coarse-level triangles.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

NONE = 0
DIRICHLET = 1
ROBIN = 2

TAG_NAMES = {NONE: "NONE", DIRICHLET: "DIRICHLET", ROBIN: "ROBIN"}
TAG_CODES = {v: k for k, v in TAG_NAMES.items()}


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Domain:
    """Geometry plus boundary partition.

    ``kind`` is ``"interval"`` or ``"square"``. For the interval, ``left`` and
    ``right`` tag the end points; for the square, ``outer`` tags the boundary of
    the unit square and ``hole_tag`` the boundary of the optional triangular
    ``hole`` (three vertices).
    """

    kind: str
    left: int = DIRICHLET
    right: int = DIRICHLET
    outer: int = DIRICHLET
    hole: tuple[tuple[float, float], ...] | None = None
    hole_tag: int = DIRICHLET

    @property
    def dim(self) -> int:
        return 1 if self.kind == "interval" else 2

    def canonical(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "interval":
            d.update(left=TAG_NAMES[self.left], right=TAG_NAMES[self.right])
        else:
            d["outer"] = TAG_NAMES[self.outer]
            if self.hole is not None:
                d["hole"] = [[float(c) for c in p] for p in self.hole]
                d["hole_tag"] = TAG_NAMES[self.hole_tag]
        return d


def interval(left: int = DIRICHLET, right: int = DIRICHLET) -> Domain:
    return Domain("interval", left=left, right=right)


def square(outer: int = DIRICHLET, hole=None, hole_tag: int = DIRICHLET) -> Domain:
    if hole is not None:
        hole = tuple(tuple(float(c) for c in p) for p in hole)
        if len(hole) != 3:
            raise MeshError("hole must be a triangle given by three vertices")
    return Domain("square", outer=outer, hole=hole, hole_tag=hole_tag)


@dataclass(eq=False)
class Mesh:
    dim: int
    level: int
    nodes: np.ndarray  # (n, d) coordinates
    lattice: np.ndarray  # (n, d) integer lattice coordinates at this level
    elements: np.ndarray  # (m, d+1) node indices, positively oriented
    facets: np.ndarray  # (k, d) boundary facets
    facet_tags: np.ndarray  # (k,)
    facet_elements: np.ndarray  # (k,) element owning each boundary facet
    _lookup: np.ndarray = field(repr=False)  # lattice -> node index or -1

    @property
    def h(self) -> float:
        return 2.0 ** -self.level

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    def node_at(self, lattice_coords) -> np.ndarray:
        lc = np.atleast_2d(np.asarray(lattice_coords, dtype=np.int64))
        return self._lookup[tuple(lc.T)]

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    @cached_property
    def volumes(self) -> np.ndarray:
        p = self.nodes[self.elements]
        if self.dim == 1:
            return p[:, 1, 0] - p[:, 0, 0]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def node_elements(self) -> sp.csr_matrix:
        """Node-to-element incidence, shape (n_nodes, n_elements)."""
        m, k = self.elements.shape
        rows = self.elements.ravel()
        cols = np.repeat(np.arange(m), k)
        return sp.csr_matrix((np.ones(m * k, dtype=np.int8), (rows, cols)),
                             shape=(self.n_nodes, m))

    @cached_property
    def element_neighbors(self) -> sp.csr_matrix:
        """Elements sharing at least one vertex (symmetric, no diagonal)."""
        inc = self.node_elements.astype(np.int32)
        adj = (inc.T @ inc).tocsr()
        adj.setdiag(0)
        adj.eliminate_zeros()
        adj.data[:] = 1
        return adj.astype(np.int8)

    @cached_property
    def node_valence(self) -> np.ndarray:
        return np.bincount(self.elements.ravel(), minlength=self.n_nodes)

    @cached_property
    def node_boundary_tag(self) -> np.ndarray:
        """Per node: -1 off the boundary, else the facet tag (Dirichlet wins)."""
        out = -np.ones(self.n_nodes, dtype=np.int64)
        for tag in (NONE, ROBIN, DIRICHLET):
            out[self.boundary_nodes(tag)] = tag
        return out

    def boundary_nodes(self, tag: int | None = None) -> np.ndarray:
        f = self.facets if tag is None else self.facets[self.facet_tags == tag]
        return np.unique(f.ravel())

    def dump(self, fh) -> None:
        """Write the plain text mesh format used by ``--dump-mesh``."""
        fh.write(f"{self.dim} {self.n_nodes} {self.n_elements}\n")
        for p in self.nodes:
            fh.write(" ".join(repr(float(c)) for c in p) + "\n")
        for e in self.elements:
            fh.write(" ".join(str(int(i)) for i in e) + "\n")
        for f, t in zip(self.facets, self.facet_tags):
            fh.write(" ".join(str(int(i)) for i in f) + f" {TAG_NAMES[int(t)]}\n")


def adjacency(mesh: Mesh) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Node-to-element and element-to-element (vertex sharing) tables."""
    ne = mesh.node_elements
    ee = mesh.element_neighbors
    n2e = [ne.indices[ne.indptr[i]:ne.indptr[i + 1]].copy() for i in range(mesh.n_nodes)]
    e2e = [ee.indices[ee.indptr[i]:ee.indptr[i + 1]].copy() for i in range(mesh.n_elements)]
    return n2e, e2e


def _interval_mesh(level: int, domain: Domain) -> Mesh:
    n = 2 ** level
    lattice = np.arange(n + 1)[:, None]
    nodes = lattice / n
    elements = np.column_stack([np.arange(n), np.arange(1, n + 1)])
    facets = np.array([[0], [n]])
    tags = np.array([domain.left, domain.right])
    return Mesh(1, level, nodes, lattice, elements, facets, tags,
                np.array([0, n - 1]), np.arange(n + 1))


def _in_triangle(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    a, b, c = tri
    m = np.array([b - a, c - a]).T
    lam = np.linalg.solve(m, (points - a).T).T
    eps = 1e-12
    return (lam[:, 0] > eps) & (lam[:, 1] > eps) & (lam.sum(axis=1) < 1 - eps)


def _square_mesh(level: int, domain: Domain) -> Mesh:
    n = 2 ** level
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    i = i.ravel()
    j = j.ravel()
    # full lattice numbering: node (i, j) -> j*(n+1) + i
    v00 = j * (n + 1) + i
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    elements = np.empty((2 * n * n, 3), dtype=np.int64)
    elements[0::2] = lower
    elements[1::2] = upper

    li, lj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="xy")
    lattice = np.column_stack([li.ravel(), lj.ravel()])
    nodes = lattice / n

    if domain.hole is not None:
        check_hole(domain, level)
        tri = np.asarray(domain.hole, dtype=float)
        keep = ~_in_triangle(nodes[elements].mean(axis=1), tri)
        elements = elements[keep]
        used = np.zeros(len(nodes), dtype=bool)
        used[elements.ravel()] = True
        renum = -np.ones(len(nodes), dtype=np.int64)
        renum[used] = np.arange(used.sum())
        elements = renum[elements]
        nodes = nodes[used]
        lattice = lattice[used]

    lookup = -np.ones((n + 1, n + 1), dtype=np.int64)
    lookup[lattice[:, 0], lattice[:, 1]] = np.arange(len(nodes))

    # boundary edges appear in exactly one element
    m = len(elements)
    local = [(0, 1), (1, 2), (2, 0)]
    edges = np.concatenate([elements[:, list(e)] for e in local])
    owner = np.tile(np.arange(m), 3)
    key = np.sort(edges, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    bmask = counts[inv] == 1
    facets = edges[bmask]
    facet_owner = owner[bmask]
    order = np.lexsort((facets[:, 1], facets[:, 0]))
    facets = facets[order]
    facet_owner = facet_owner[order]

    lat = lattice[facets]  # (k, 2, 2)
    on_outer = ((lat[:, 0, 0] == lat[:, 1, 0]) & np.isin(lat[:, 0, 0], (0, n))) | \
               ((lat[:, 0, 1] == lat[:, 1, 1]) & np.isin(lat[:, 0, 1], (0, n)))
    tags = np.where(on_outer, domain.outer, domain.hole_tag)
    return Mesh(2, level, nodes, lattice, elements, facets, tags, facet_owner, lookup)


def build_mesh(domain: Domain, level: int) -> Mesh:
    if level < 0:
        raise MeshError("mesh level must be nonnegative")
    if domain.kind == "interval":
        return _interval_mesh(level, domain)
    if domain.kind == "square":
        return _square_mesh(level, domain)
    raise MeshError(f"unknown domain kind {domain.kind!r}")


def check_hole(domain: Domain, level: int) -> None:
    """Reject holes that are not a union of triangles at ``level``."""
    if domain.hole is None:
        return
    tri = np.asarray(domain.hole, dtype=float)
    n = 2 ** level
    scaled = tri * n
    if not np.allclose(scaled, np.round(scaled), atol=1e-12):
        raise MeshError(f"hole vertices {domain.hole} are not on the 2^-{level} lattice")
    a, b = tri[1] - tri[0], tri[2] - tri[0]
    area = 0.5 * abs(a[0] * b[1] - a[1] * b[0])
    if area <= 0:
        raise MeshError("hole triangle is degenerate")
    full = _square_mesh(level, square())
    inside = _in_triangle(full.centroids, tri)
    removed = full.volumes[inside].sum()
    if abs(removed - area) > 1e-12:
        raise MeshError(
            f"hole is not a union of Friedrichs-Keller triangles at level {level}: "
            f"covered area {removed:.6g} vs triangle area {area:.6g}; its hypotenuse "
            "must follow the (1, 1) diagonal and its legs the lattice axes")


@dataclass(eq=False)
class MeshHierarchy:
    coarse: Mesh
    fine: Mesh
    parent: np.ndarray  # fine element -> coarse element
    coarse_to_fine_node: np.ndarray  # coarse node -> fine node

    @property
    def H(self) -> float:
        return self.coarse.h

    @property
    def h(self) -> float:
        return self.fine.h

    @property
    def dim(self) -> int:
        return self.coarse.dim

    @cached_property
    def children(self) -> list[np.ndarray]:
        order = np.argsort(self.parent, kind="stable")
        counts = np.bincount(self.parent, minlength=self.coarse.n_elements)
        return np.split(order, np.cumsum(counts)[:-1])

    @cached_property
    def children_array(self) -> np.ndarray:
        return np.array(self.children)


def build_hierarchy(domain: Domain, coarse_level: int, fine_level: int) -> MeshHierarchy:
    """Coarse and fine mesh of the same domain with parent/child maps.

    ``fine_level == coarse_level`` is accepted (the identity hierarchy); the
    fine mesh is otherwise the uniform red refinement of the coarse one.
    """
    if fine_level < coarse_level:
        raise MeshError(f"fine level {fine_level} must not be below coarse level {coarse_level}")
    if coarse_level < 0:
        raise MeshError("coarse level must be nonnegative")
    if domain.kind == "square":
        check_hole(domain, coarse_level)
    coarse = build_mesh(domain, coarse_level)
    fine = build_mesh(domain, fine_level)
    k = fine_level - coarse_level
    factor = 2 ** k
    c2f = fine.node_at(coarse.lattice * factor)
    if np.any(c2f < 0):
        raise MeshError("coarse nodes missing on the fine mesh")

    # parent element: locate fine centroids in the coarse lattice
    nc = 2 ** coarse_level
    cen = fine.centroids * nc
    cell = np.floor(cen).astype(np.int64)
    cell = np.minimum(cell, nc - 1)
    if domain.kind == "interval":
        parent = cell[:, 0]
    else:
        frac = cen - cell
        is_upper = frac[:, 1] > frac[:, 0]
        full_index = 2 * (cell[:, 1] * nc + cell[:, 0]) + is_upper
        table = -np.ones(2 * nc * nc, dtype=np.int64)
        # coarse elements are stored in full-lattice order minus removed ones
        cc = coarse.centroids * nc
        ccell = np.floor(cc).astype(np.int64)
        cup = (cc - ccell)[:, 1] > (cc - ccell)[:, 0]
        table[2 * (ccell[:, 1] * nc + ccell[:, 0]) + cup] = np.arange(coarse.n_elements)
        parent = table[full_index]
    if np.any(parent < 0):
        raise MeshError("fine element without coarse parent")
    return MeshHierarchy(coarse, fine, parent, c2f)


@dataclass(eq=False)
class Patch:
    element: int
    ell: int
    coarse_elements: np.ndarray
    fine_elements: np.ndarray
    fine_nodes: np.ndarray
    artificial_nodes: np.ndarray
    true_nodes: np.ndarray  # on the physical boundary, not on the artificial one
    true_node_tags: np.ndarray
    interior_nodes: np.ndarray  # fine nodes not on the artificial boundary

    @property
    def saturated(self) -> bool:
        return len(self.artificial_nodes) == 0

    def free_nodes(self, dirichlet_mask: np.ndarray) -> np.ndarray:
        """Patch unknowns: not on the artificial boundary and not Dirichlet."""
        nodes = self.interior_nodes
        return nodes[~dirichlet_mask[nodes]]


def coarse_patch_elements(mesh: Mesh, T: int, ell: int) -> np.ndarray:
    if ell < 1:
        raise MeshError("oversampling order must be at least 1")
    ne = mesh.node_elements
    mask = np.zeros(mesh.n_elements, dtype=bool)
    mask[T] = True
    for _ in range(ell):
        nodes = np.unique(mesh.elements[mask].ravel())
        reached = ne[nodes].indices
        new = mask.copy()
        new[reached] = True
        if new.sum() == mask.sum():
            break
        mask = new
    return np.flatnonzero(mask)


def element_patch(hierarchy: MeshHierarchy, T: int, ell: int) -> Patch:
    """The ``ell``-th order vertex-neighbour patch of coarse element ``T``."""
    coarse_els = coarse_patch_elements(hierarchy.coarse, T, ell)
    fine = hierarchy.fine
    in_patch = np.zeros(hierarchy.coarse.n_elements, dtype=bool)
    in_patch[coarse_els] = True
    fine_els = np.concatenate([hierarchy.children[t] for t in coarse_els])
    fine_els.sort()
    counts = np.bincount(fine.elements[fine_els].ravel(), minlength=fine.n_nodes)
    nodes = np.flatnonzero(counts)
    interior_mask = counts[nodes] == fine.node_valence[nodes]
    interior = nodes[interior_mask]
    artificial = nodes[~interior_mask]

    btag = fine.node_boundary_tag
    true_nodes = interior[btag[interior] >= 0]
    true_tags = btag[true_nodes]
    return Patch(T, ell, coarse_els, fine_els, nodes, artificial, true_nodes,
                 true_tags, interior)


def layers_to_saturate(mesh: Mesh) -> int:
    """An oversampling order large enough that every patch is the whole mesh.

    Vertex layers advance one cell per step along the mesh diagonal but only
    half a cell per step across it, hence the factor two.
    """
    return 2 ** (mesh.level + 1) + 1


def parse_levels(spec: str | Sequence[int]) -> list[int]:
    """``"1..5"`` -> [1..5], ``"1,2,4"`` -> [1, 2, 4]."""
    if not isinstance(spec, str):
        return [int(v) for v in spec]
    out: list[int] = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            a, b = part.split("..")
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out
