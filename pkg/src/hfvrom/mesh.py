"""Primal tetrahedral mesh, its face-type dual mesh and the geometric kernels
shared by the solver and the reduced model.

Every primal face generates one dual cell.  An interior face ``f`` shared by
tetrahedra ``T1`` and ``T2`` owns the two sub-tetrahedra spanned by ``f`` and
the barycentres of ``T1`` and ``T2``; a boundary face owns only the one on the
interior side.  The dual node sits at the face barycentre.

Inside a tetrahedron the six triangles ``(edge, barycentre)`` are the facets
separating the dual cells of the two faces that share the edge, so every
internal dual facet is addressed by ``(tet, local edge)``.
"""
from __future__ import annotations

import itertools
import os
import tempfile
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import DegenerateElement, InvalidArgument, MalformedMesh

# local vertex triplet of the face opposite local vertex k
FACE_LOCAL = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])
# local edges (a, b) and the two remaining vertices (c, d)
EDGE_LOCAL = np.array([[0, 1, 2, 3], [0, 2, 1, 3], [0, 3, 1, 2],
                       [1, 2, 0, 3], [1, 3, 0, 2], [2, 3, 0, 1]])
DEGENERACY_RTOL = 1e-14

CUBE_SIDES = ("left", "right", "front", "back", "bottom", "top")


def _signed_volumes(vertices, tets):
    x = vertices[tets]
    d = x[:, 1:] - x[:, :1]
    return np.einsum("ij,ij->i", d[:, 0], np.cross(d[:, 1], d[:, 2])) / 6.0


@dataclass(frozen=True, eq=False)
class PrimalMesh:
    """Conforming tetrahedral mesh with positively oriented elements.

    ``faces[f]`` holds sorted vertex indices; ``face_tets[f]`` is
    ``(owner, neighbour)`` with ``-1`` for boundary faces and
    ``face_flip[f]`` records whether the right-hand normal of the sorted
    triplet points *into* the owner.  ``tet_faces[t, k]`` is the face opposite
    local vertex ``k``.
    """

    vertices: np.ndarray
    tets: np.ndarray
    faces: np.ndarray
    face_tets: np.ndarray
    face_flip: np.ndarray
    tet_faces: np.ndarray
    boundary_tags: dict = field(repr=False)

    @classmethod
    def from_arrays(cls, vertices, tets, boundary_tags=None, default_tag=None):
        """Build adjacency for a raw vertex/tet list.

        ``boundary_tags`` maps vertex triplets (any order) to a region name.
        Boundary faces missing from the map get ``default_tag`` or raise.
        """
        vertices = np.ascontiguousarray(vertices, dtype=float)
        tets = np.array(tets, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MalformedMesh("vertices must be an (n, 3) array")
        if tets.ndim != 2 or tets.shape[1] != 4 or len(tets) == 0:
            raise MalformedMesh("tets must be a non-empty (m, 4) array")
        if tets.min() < 0 or tets.max() >= len(vertices):
            raise MalformedMesh("tet references a missing vertex")

        vol = _signed_volumes(vertices, tets)
        scale = np.mean(np.abs(vol))
        bad = np.flatnonzero(np.abs(vol) <= DEGENERACY_RTOL * scale)
        if scale == 0.0 or len(bad):
            raise DegenerateElement(f"degenerate tetrahedron {bad[:1]}", element=bad[:1])
        neg = vol < 0
        tets[neg] = tets[neg][:, [1, 0, 2, 3]]

        local = tets[:, FACE_LOCAL]                       # (nT, 4, 3)
        keys = np.sort(local.reshape(-1, 3), axis=1)
        faces, inverse, counts = np.unique(keys, axis=0, return_inverse=True,
                                           return_counts=True)
        inverse = inverse.reshape(-1)
        if counts.max() > 2:
            raise MalformedMesh("a face is shared by more than two tetrahedra")
        tet_faces = inverse.reshape(-1, 4)

        order = np.argsort(inverse, kind="stable")
        owners = order // 4
        start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        face_tets = np.full((len(faces), 2), -1, dtype=np.int64)
        face_tets[:, 0] = owners[start]
        two = counts == 2
        face_tets[two, 1] = owners[start[two] + 1]

        # orientation of the sorted triplet relative to the owner
        x = vertices[faces]
        nrm = np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0])
        owner_centroid = vertices[tets[face_tets[:, 0]]].mean(axis=1)
        face_flip = np.einsum("ij,ij->i", nrm, x.mean(axis=1) - owner_centroid) < 0

        boundary = np.flatnonzero(~two)
        lookup = {}
        for key, tag in (boundary_tags or {}).items():
            lookup[tuple(sorted(int(v) for v in key))] = str(tag)
        tags = {}
        for f in boundary:
            key = tuple(int(v) for v in faces[f])
            tag = lookup.pop(key, default_tag)
            if tag is None:
                raise MalformedMesh(f"boundary face {key} has no tag")
            tags[int(f)] = tag
        if lookup:
            raise MalformedMesh(f"tagged triplet {next(iter(lookup))} is not a boundary face")
        return cls(vertices, tets, faces, face_tets, face_flip, tet_faces, tags)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_tets(self):
        return len(self.tets)

    @property
    def n_faces(self):
        return len(self.faces)

    @cached_property
    def tet_volumes(self):
        return _signed_volumes(self.vertices, self.tets)

    @cached_property
    def tet_barycenters(self):
        return self.vertices[self.tets].mean(axis=1)

    @cached_property
    def face_barycenters(self):
        return self.vertices[self.faces].mean(axis=1)

    @cached_property
    def tet_face_areas(self):
        """Outward area vectors ``(nT, 4, 3)`` of the face opposite each vertex."""
        x = self.vertices[self.tets]
        tri = x[:, FACE_LOCAL]                                    # (nT, 4, 3, 3)
        s = 0.5 * np.cross(tri[:, :, 1] - tri[:, :, 0], tri[:, :, 2] - tri[:, :, 0])
        away = tri.mean(axis=2) - x
        sign = np.sign(np.einsum("tkj,tkj->tk", s, away))
        return s * sign[..., None]

    @cached_property
    def barycentric_gradients(self):
        """Gradients ``(nT, 4, 3)`` of the P1 hat functions on each element."""
        return -self.tet_face_areas / (3.0 * self.tet_volumes[:, None, None])

    @cached_property
    def boundary_faces(self):
        return np.array(sorted(self.boundary_tags), dtype=np.int64)

    @cached_property
    def face_area_vectors(self):
        """Area vectors oriented from owner to neighbour (outward on the boundary)."""
        x = self.vertices[self.faces]
        s = 0.5 * np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0])
        return np.where(self.face_flip[:, None], -s, s)

    @cached_property
    def lumped_mass(self):
        """Integral of each P1 hat function; the zero-mean weights."""
        w = np.zeros(self.n_vertices)
        np.add.at(w, self.tets.ravel(), np.repeat(self.tet_volumes / 4.0, 4))
        return w

    def tet_gradients(self, vertex_values):
        """Element-wise constant gradient of the P1 interpolant.

        ``vertex_values`` has shape ``(nV, ...)``; the result has shape
        ``(nT, ..., 3)``.
        """
        v = np.asarray(vertex_values, dtype=float)[self.tets]      # (nT, 4, ...)
        return np.einsum("tk...,tkj->t...j", v, self.barycentric_gradients)


def build_cube_primal(n):
    """Unit cube, ``n**3`` hexahedra each split into six tetrahedra sharing the
    main diagonal (Kuhn split, conforming across hexahedra)."""
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidArgument(f"subdivisions must be a positive integer, got {n!r}")
    n = int(n)
    g = np.linspace(0.0, 1.0, n + 1)
    zz, yy, xx = np.meshgrid(g, g, g, indexing="ij")
    vertices = np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])

    def vid(i, j, k):
        return i + (n + 1) * (j + (n + 1) * k)

    k, j, i = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    tets = []
    eye = np.eye(3, dtype=np.int64)
    for perm in itertools.permutations(range(3)):
        p1 = eye[perm[0]]
        p2 = p1 + eye[perm[1]]
        path = [np.zeros(3, dtype=np.int64), p1, p2, np.ones(3, dtype=np.int64)]
        tets.append(np.column_stack([vid(i + o[0], j + o[1], k + o[2]) for o in path]))
    tets = np.stack(tets, axis=1).reshape(-1, 4)

    tags = {}
    for f in _boundary_triplets(tets):
        x = vertices[list(f)]
        for axis in range(3):
            for side, val in ((0, 0.0), (1, 1.0)):
                if np.all(x[:, axis] == val):
                    tags[f] = CUBE_SIDES[2 * axis + side]
    return PrimalMesh.from_arrays(vertices, tets, tags)


def _boundary_triplets(tets):
    keys = np.sort(tets[:, FACE_LOCAL].reshape(-1, 3), axis=1)
    uniq, counts = np.unique(keys, axis=0, return_counts=True)
    return [tuple(int(v) for v in row) for row in uniq[counts == 1]]


@dataclass(frozen=True, eq=False)
class DualMesh:
    """Face-type finite volume mesh built on a :class:`PrimalMesh`.

    Internal facets are stored per ``(tet, local edge)`` with area vectors
    pointing from ``facet_left`` to ``facet_right``.  Boundary facets are the
    boundary primal faces, oriented outward of ``bfacet_cell``.
    """

    primal: PrimalMesh
    nodes: np.ndarray
    volumes: np.ndarray
    cell_tets: np.ndarray
    boundary: np.ndarray
    tags: np.ndarray
    facet_left: np.ndarray
    facet_right: np.ndarray
    facet_area: np.ndarray
    facet_centroid: np.ndarray
    facet_tet: np.ndarray
    bfacet_cell: np.ndarray
    bfacet_area: np.ndarray
    bfacet_centroid: np.ndarray

    @property
    def n_cells(self):
        return len(self.nodes)

    @cached_property
    def interior(self):
        return np.flatnonzero(~self.boundary)

    @cached_property
    def n_generating(self):
        return np.where(self.cell_tets[:, 1] >= 0, 2, 1)

    @cached_property
    def divergence_matrix(self):
        """Sparse ``(nC, nFacets)`` incidence: +1 on the left cell, -1 on the right."""
        m = len(self.facet_left)
        rows = np.concatenate([self.facet_left, self.facet_right])
        cols = np.concatenate([np.arange(m), np.arange(m)])
        vals = np.concatenate([np.ones(m), -np.ones(m)])
        return sparse.csr_matrix((vals, (rows, cols)), shape=(self.n_cells, m))

    @cached_property
    def boundary_scatter(self):
        m = len(self.bfacet_cell)
        return sparse.csr_matrix((np.ones(m), (self.bfacet_cell, np.arange(m))),
                                 shape=(self.n_cells, m))

    @cached_property
    def tet_to_cell(self):
        """Sparse ``(nC, nT)`` arithmetic-mean operator over generating tets."""
        ct = self.cell_tets
        rows = np.repeat(np.arange(self.n_cells), 2)
        cols = ct.ravel()
        keep = cols >= 0
        w = (1.0 / self.n_generating)[rows[keep]]
        return sparse.csr_matrix((w, (rows[keep], cols[keep])),
                                 shape=(self.n_cells, self.primal.n_tets))

    @cached_property
    def cell_gradient_matrices(self):
        """``G[c]`` (``nC x nV``) with ``(G[c] p)_i = int_{C_i} d_c p`` for P1 ``p``."""
        pm = self.primal
        out = []
        for c in range(3):
            rows, cols, vals = [], [], []
            w = pm.barycentric_gradients[:, :, c] * (pm.tet_volumes / 4.0)[:, None]
            for k in range(4):
                cell = pm.tet_faces[:, k]
                for m in range(4):
                    rows.append(cell)
                    cols.append(pm.tets[:, m])
                    vals.append(w[:, m])
            out.append(sparse.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(self.n_cells, pm.n_vertices)))
        return out

    def cell_facets(self, i):
        """Facets of cell ``i`` as ``(neighbour, outward area vector)`` pairs;
        the neighbour is ``-1`` for the boundary facet."""
        out = []
        for f in np.flatnonzero(self.facet_left == i):
            out.append((int(self.facet_right[f]), self.facet_area[f]))
        for f in np.flatnonzero(self.facet_right == i):
            out.append((int(self.facet_left[f]), -self.facet_area[f]))
        for f in np.flatnonzero(self.bfacet_cell == i):
            out.append((-1, self.bfacet_area[f]))
        return out

    def face_gradients(self, cell_values):
        """Element-wise gradient of a dual-node field.

        The affine function through the four face-barycentre values of a
        tetrahedron has gradient ``sum_f w_f S_f / |T|`` (``S_f`` outward
        area vectors), identical to the Green-Gauss formula.  Input shape
        ``(nC, ...)``, output ``(nT, ..., 3)``.
        """
        pm = self.primal
        v = np.asarray(cell_values, dtype=float)[pm.tet_faces]       # (nT, 4, ...)
        g = np.einsum("tk...,tkj->t...j", v, pm.tet_face_areas)
        return g / pm.tet_volumes.reshape((-1,) + (1,) * (g.ndim - 1))

    def to_nodes(self, per_tet):
        """Arithmetic mean of element values over each cell's generating tets."""
        per_tet = np.asarray(per_tet, dtype=float)
        flat = per_tet.reshape(len(per_tet), -1)
        return (self.tet_to_cell @ flat).reshape((self.n_cells,) + per_tet.shape[1:])


def build_dual(primal):
    pm = primal
    nF = pm.n_faces
    ft = pm.face_tets
    if ft[:, 0].min() < 0:
        raise MalformedMesh("face without owner tetrahedron")
    counts = np.bincount(pm.tet_faces.ravel(), minlength=nF)
    if np.any(counts != np.where(ft[:, 1] >= 0, 2, 1)):
        raise MalformedMesh("face adjacency is inconsistent with tet_faces")
    boundary = ft[:, 1] < 0
    if set(np.flatnonzero(boundary).tolist()) != set(pm.boundary_tags):
        raise MalformedMesh("boundary tags do not match boundary faces")

    vol = pm.tet_volumes
    cell_vol = np.zeros(nF)
    np.add.at(cell_vol, pm.tet_faces.ravel(), np.repeat(vol / 4.0, 4))

    x = pm.vertices[pm.tets]                                # (nT, 4, 3)
    bary = pm.tet_barycenters
    e = EDGE_LOCAL
    xa, xb = x[:, e[:, 0]], x[:, e[:, 1]]                   # (nT, 6, 3)
    xc, xd = x[:, e[:, 2]], x[:, e[:, 3]]
    xt = np.broadcast_to(bary[:, None, :], xa.shape)
    s = 0.5 * np.cross(xb - xa, xt - xa)
    sign = np.sign(np.einsum("tej,tej->te", s, xc - xd))
    s = s * sign[..., None]
    left = pm.tet_faces[:, e[:, 2]]                         # face opposite c
    right = pm.tet_faces[:, e[:, 3]]                        # face opposite d

    bf = pm.boundary_faces
    tags = np.full(nF, "", dtype=object)
    for f, tag in pm.boundary_tags.items():
        tags[f] = tag

    return DualMesh(
        primal=pm,
        nodes=pm.face_barycenters,
        volumes=cell_vol,
        cell_tets=ft.copy(),
        boundary=boundary,
        tags=tags,
        facet_left=left.ravel(),
        facet_right=right.ravel(),
        facet_area=s.reshape(-1, 3),
        facet_centroid=((xa + xb + xt) / 3.0).reshape(-1, 3),
        facet_tet=np.repeat(np.arange(pm.n_tets), 6),
        bfacet_cell=bf,
        bfacet_area=pm.face_area_vectors[bf],
        bfacet_centroid=pm.face_barycenters[bf],
    )


def p1_gradient(tet, vertex_values):
    """Gradient of the affine function interpolating four vertex values."""
    x = np.asarray(tet, dtype=float).reshape(4, 3)
    v = np.asarray(vertex_values, dtype=float).reshape(4)
    d = x[1:] - x[0]
    vol = np.linalg.det(d) / 6.0
    scale = max(np.max(np.linalg.norm(d, axis=1)), np.finfo(float).tiny) ** 3 / 6.0
    if abs(vol) <= DEGENERACY_RTOL * scale:
        raise DegenerateElement("degenerate tetrahedron")
    return np.linalg.solve(d, v[1:] - v[0])


def node_gradient(dual, per_tet_gradients, cell=None):
    """Average of element gradients over the generating tets of each cell
    (or of one ``cell``)."""
    g = np.asarray(per_tet_gradients, dtype=float)
    if cell is None:
        return dual.to_nodes(g)
    tets = dual.cell_tets[cell]
    tets = tets[tets >= 0]
    return g[tets].mean(axis=0)


# -- text mesh format ---------------------------------------------------------

def write_mesh(mesh, path):
    lines = ["HFM 1", f"vertices {mesh.n_vertices}"]
    lines += [" ".join(f"{c:.17g}" for c in row) for row in mesh.vertices]
    lines.append(f"tets {mesh.n_tets}")
    lines += [" ".join(str(int(v)) for v in row) for row in mesh.tets]
    lines.append(f"boundary {len(mesh.boundary_tags)}")
    for f in mesh.boundary_faces:
        a, b, c = (int(v) for v in mesh.faces[f])
        lines.append(f"{a} {b} {c} {mesh.boundary_tags[int(f)]}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_mesh(path):
    tokens = Path(path).read_text().split()
    pos = 0

    def take(k=1):
        nonlocal pos
        if pos + k > len(tokens):
            raise MalformedMesh("unexpected end of mesh file")
        out = tokens[pos:pos + k]
        pos += k
        return out

    if take(2) != ["HFM", "1"]:
        raise MalformedMesh("missing 'HFM 1' header")

    def section(name):
        word, count = take(2)
        if word != name:
            raise MalformedMesh(f"expected section {name!r}, got {word!r}")
        return int(count)

    nv = section("vertices")
    vertices = np.array(take(3 * nv), dtype=float).reshape(nv, 3)
    nt = section("tets")
    tets = np.array(take(4 * nt), dtype=np.int64).reshape(nt, 4)
    nb = section("boundary")
    tags = {}
    for _ in range(nb):
        a, b, c, tag = take(4)
        tags[(int(a), int(b), int(c))] = tag
    return PrimalMesh.from_arrays(vertices, tets, tags)
