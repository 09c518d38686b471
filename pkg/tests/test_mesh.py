import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hfvrom.errors import DegenerateElement, InvalidArgument, MalformedMesh
from hfvrom.mesh import (CUBE_SIDES, PrimalMesh, build_cube_primal, build_dual, node_gradient,
                         p1_gradient, read_mesh, write_mesh)

from conftest import random_tets


@pytest.mark.parametrize("n,tets,verts", [(1, 6, 8), (2, 48, 27), (3, 162, 64)])
def test_cube_counts(n, tets, verts):
    pm = build_cube_primal(n)
    assert pm.n_tets == tets
    assert pm.n_vertices == verts
    assert abs(pm.tet_volumes.sum() - 1.0) <= 1e-12


def test_large_mesh_counts():
    pm = build_cube_primal(16)
    assert pm.n_tets == 24576
    # one dual cell per primal face
    assert pm.n_faces == 50688


@pytest.mark.parametrize("n", [0, -1, 2.5])
def test_cube_rejects_bad_n(n):
    with pytest.raises(InvalidArgument):
        build_cube_primal(n)


@pytest.mark.parametrize("n", [1, 2, 4])
def test_primal_invariants(n):
    pm = build_cube_primal(n)
    assert np.all(pm.tet_volumes > 0)
    counts = np.bincount(pm.tet_faces.ravel(), minlength=pm.n_faces)
    interior = pm.face_tets[:, 1] >= 0
    assert np.all(counts[interior] == 2)
    assert np.all(counts[~interior] == 1)
    assert set(pm.boundary_tags.values()) == set(CUBE_SIDES)
    # boundary tags agree with the geometry of the side
    axis = {"left": (0, 0.0), "right": (0, 1.0), "front": (1, 0.0), "back": (1, 1.0),
            "bottom": (2, 0.0), "top": (2, 1.0)}
    for f, tag in pm.boundary_tags.items():
        k, val = axis[tag]
        assert np.allclose(pm.vertices[pm.faces[f], k], val)


@pytest.mark.parametrize("n", [1, 2, 4, 8])
def test_dual_volume_partition(n):
    pm = build_cube_primal(n)
    d = build_dual(pm)
    assert d.n_cells == pm.n_faces
    assert abs(d.volumes.sum() - pm.tet_volumes.sum()) <= 1e-12 * pm.tet_volumes.sum()
    assert np.all(d.n_generating[d.boundary] == 1)
    assert np.all(d.n_generating[~d.boundary] == 2)


@pytest.mark.parametrize("n", [1, 2, 4, 8])
def test_dual_cells_are_closed(n):
    d = build_dual(build_cube_primal(n))
    total = np.zeros((d.n_cells, 3))
    np.add.at(total, d.facet_left, d.facet_area)
    np.add.at(total, d.facet_right, -d.facet_area)
    np.add.at(total, d.bfacet_cell, d.bfacet_area)
    assert np.abs(total).max() <= 1e-12


def test_constant_field_flux_balance(dual2, rng):
    # per cell, sum of v.S over facets vanishes for a constant v
    v = rng.normal(size=3)
    flux = np.zeros(dual2.n_cells)
    np.add.at(flux, dual2.facet_left, dual2.facet_area @ v)
    np.add.at(flux, dual2.facet_right, -(dual2.facet_area @ v))
    np.add.at(flux, dual2.bfacet_cell, dual2.bfacet_area @ v)
    surface = np.zeros(dual2.n_cells)
    a = np.linalg.norm(dual2.facet_area, axis=1)
    np.add.at(surface, dual2.facet_left, a)
    np.add.at(surface, dual2.facet_right, a)
    np.add.at(surface, dual2.bfacet_cell, np.linalg.norm(dual2.bfacet_area, axis=1))
    assert np.all(np.abs(flux) <= 1e-12 * np.linalg.norm(v) * surface)


def test_cell_facets_close(dual2):
    for i in range(0, dual2.n_cells, 7):
        s = sum(area for _, area in dual2.cell_facets(i))
        assert np.abs(s).max() <= 1e-12


def test_single_tet_dual():
    x = np.array([[0, 0, 0], [2, 0, 0], [0, 1, 0], [0, 0, 3.0]])
    pm = PrimalMesh.from_arrays(x, [[0, 1, 2, 3]], default_tag="wall")
    d = build_dual(pm)
    V = pm.tet_volumes[0]
    assert d.n_cells == 4
    assert np.allclose(d.volumes, V / 4, rtol=0, atol=1e-15)
    assert np.all(d.boundary)
    assert np.allclose(d.nodes, pm.face_barycenters)


def test_orientation_is_fixed():
    x = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    pm = PrimalMesh.from_arrays(x, [[1, 0, 2, 3]], default_tag="wall")
    assert pm.tet_volumes[0] > 0


def test_degenerate_tet_rejected():
    x = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.0]])
    with pytest.raises(DegenerateElement):
        PrimalMesh.from_arrays(x, [[0, 1, 2, 3]], default_tag="wall")


def test_malformed_adjacency_rejected():
    x = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0], [0, 0, -1.0], [1, 1, 1.0]])
    # three tets sharing face (0, 1, 2)
    tets = [[0, 1, 2, 3], [0, 1, 2, 4], [0, 2, 1, 5]]
    with pytest.raises(MalformedMesh):
        PrimalMesh.from_arrays(x, tets, default_tag="wall")


def test_missing_boundary_tag_rejected():
    x = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    with pytest.raises(MalformedMesh):
        PrimalMesh.from_arrays(x, [[0, 1, 2, 3]])


def test_p1_gradient_examples(rng):
    for x in random_tets(rng, 20):
        assert np.allclose(p1_gradient(x, x[:, 0]), [1, 0, 0], atol=1e-12)
        assert np.allclose(p1_gradient(x, np.full(4, 3.7)), 0, atol=1e-12)


def test_p1_gradient_matches_finite_differences(rng):
    # oracle: central differences of the barycentric interpolant
    for x in random_tets(rng, 20):
        v = rng.normal(size=4)
        T = np.column_stack([x[1:] - x[0]]).T            # columns are edges

        def interp(p):
            lam = np.linalg.solve(T, p - x[0])
            return v[0] + lam @ (v[1:] - v[0])
        c = x.mean(axis=0)
        h = 1e-5
        fd = np.array([(interp(c + h * e) - interp(c - h * e)) / (2 * h) for e in np.eye(3)])
        assert np.allclose(p1_gradient(x, v), fd, atol=1e-7)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_p1_gradient_affine_exact(seed, coef):
    x = random_tets(np.random.default_rng(seed), 1)[0]
    a, b = np.array(coef[:3]), coef[3]
    vals = x @ a + b
    assert np.abs(p1_gradient(x, vals) - a).max() <= 1e-12 * max(1.0, np.abs(a).max())


def test_p1_gradient_thousand_random_tets(rng):
    tets = random_tets(rng, 1000)
    a = np.array([2.0, 3.0, -1.0])
    worst = max(np.abs(p1_gradient(x, x @ a) - a).max() for x in tets)
    assert worst <= 1e-12


def test_p1_gradient_degenerate():
    x = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.5, 0.5, 0.0]])
    with pytest.raises(DegenerateElement):
        p1_gradient(x, [0, 1, 2, 3])


def test_mesh_gradients_match_p1_gradient(rng):
    pm = build_cube_primal(2)
    v = rng.normal(size=pm.n_vertices)
    g = pm.tet_gradients(v)
    for t in range(0, pm.n_tets, 5):
        assert np.allclose(g[t], p1_gradient(pm.vertices[pm.tets[t]], v[pm.tets[t]]), atol=1e-12)


def test_node_gradient_examples(dual2, rng):
    nt = dual2.primal.n_tets
    g = np.tile([1.0, -2.0, 0.5], (nt, 1))
    assert np.allclose(node_gradient(dual2, g), g[0])
    g = rng.normal(size=(nt, 3))
    b = int(np.flatnonzero(dual2.boundary)[0])
    owner = dual2.cell_tets[b, 0]
    assert np.array_equal(node_gradient(dual2, g, b), g[owner])
    i = int(np.flatnonzero(~dual2.boundary)[0])
    t0, t1 = dual2.cell_tets[i]
    assert np.allclose(node_gradient(dual2, g, i), 0.5 * (g[t0] + g[t1]))
    assert np.allclose(node_gradient(dual2, g)[i], 0.5 * (g[t0] + g[t1]))


def test_face_gradients_exact_for_affine(dual2, rng):
    a = rng.normal(size=3)
    g = dual2.face_gradients(dual2.nodes @ a)
    assert np.abs(g - a).max() <= 1e-12


def test_mesh_file_roundtrip(tmp_path):
    pm = build_cube_primal(2)
    p1, p2 = tmp_path / "a.hfm", tmp_path / "b.hfm"
    write_mesh(pm, p1)
    back = read_mesh(p1)
    assert np.array_equal(back.vertices, pm.vertices)
    assert np.array_equal(back.tets, pm.tets)
    assert back.boundary_tags == pm.boundary_tags
    write_mesh(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_text().startswith("HFM 1\nvertices 27\n")


def test_mesh_file_errors(tmp_path):
    p = tmp_path / "bad.hfm"
    p.write_text("HFM 2\n")
    with pytest.raises(MalformedMesh):
        read_mesh(p)
    p.write_text("HFM 1\nvertices 2\n0 0 0\n")
    with pytest.raises(MalformedMesh):
        read_mesh(p)
