import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.measure import marching_cubes as sk_marching_cubes

from conftest import make_params
from neuv.field import Decoder, VertexBank, sample_field
from neuv.hashmv import Level, VoxelKey, VoxelStore
from neuv.mesh import (CASE_COUNTS, CASE_TABLE, CUBE_EDGES, SdfGrid, TriMesh, extract_mesh,
                       marching_cubes, sample_sdf_grid, weld)


def lattice(f, lo, cell, dims):
    grid = SdfGrid(np.asarray(lo, float), cell, dims, np.zeros(dims), np.ones(dims, bool))
    grid.values = f(grid.node_positions()).reshape(dims)
    return grid


def edge_counts(mesh):
    e = np.sort(mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return counts


def directed_edges_unique(mesh):
    e = mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    return len(np.unique(e, axis=0)) == len(e)


def signed_volume(mesh):
    v = mesh.vertices[mesh.faces]
    return np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0


def field_store(f, cells, level, edge=0.2, activation="identity"):
    """Store with the given voxels and vertex SDF sampled from ``f``."""
    bank = VertexBank(seed=0)
    store = VoxelStore(edge, bank=bank)
    for c in cells:
        store.allocate(VoxelKey(*map(int, c), level))
    pos = np.zeros((len(bank), 3))
    for rec in store.records():
        pos[list(rec.vertex_ids)] = store.corner_positions(rec.key)
    raw = f(pos)
    bank.sdf_raw[:] = raw if activation == "identity" else np.arctanh(np.clip(raw, -0.999, 0.999))
    return store, bank, make_params(store, bank, Decoder(bank.feature_dim, seed=0), activation)


def query(x, store, bank, activation):
    """sample_field with far-face nodes nudged inside (voxels are half-open)."""
    for c in range(8):
        shift = 1e-11 * np.array([c & 1, c >> 1 & 1, c >> 2 & 1])
        hit = sample_field(np.asarray(x) - shift, store, bank, activation)
        if hit is not None:
            return hit.sdf
    raise AssertionError("node outside every voxel")


def box_cells(lo, hi):
    r = [np.arange(a, b) for a, b in zip(lo, hi)]
    return np.stack(np.meshgrid(*r, indexing="ij"), -1).reshape(-1, 3)


# -- case table --------------------------------------------------------------

def test_case_table_shape_and_trivial_cases():
    assert CASE_TABLE.shape[0] == 256 and len(CUBE_EDGES) == 12
    assert CASE_COUNTS[0] == 0 and CASE_COUNTS[255] == 0
    for c in range(8):
        assert CASE_COUNTS[1 << c] == 1
        assert CASE_COUNTS[255 ^ (1 << c)] == 1


def test_case_table_edges_cross_the_sign_change():
    for case in range(256):
        tris = CASE_TABLE[case, :CASE_COUNTS[case]]
        assert (CASE_TABLE[case, CASE_COUNTS[case]:] == -1).all()
        used = set(tris.ravel().tolist())
        crossing = {i for i, (a, b, _) in enumerate(CUBE_EDGES)
                    if bool(case >> a & 1) != bool(case >> b & 1)}
        assert used == crossing, case


def test_complementary_cases_use_same_edges():
    for case in range(1, 255):
        a = set(CASE_TABLE[case, :CASE_COUNTS[case]].ravel().tolist())
        b = set(CASE_TABLE[255 ^ case, :CASE_COUNTS[255 ^ case]].ravel().tolist())
        assert a == b


# -- marching cubes -----------------------------------------------------------

def test_all_positive_grid_is_empty():
    g = lattice(lambda p: np.ones(len(p)), (0, 0, 0), 0.1, (4, 4, 4))
    assert len(marching_cubes(g)) == 0


def test_single_negative_corner_gives_one_triangle():
    g = lattice(lambda p: np.ones(len(p)), (0, 0, 0), 1.0, (2, 2, 2))
    g.values[0, 0, 0] = -1.0
    m = marching_cubes(g)
    assert len(m) == 1
    assert np.allclose(np.sort(m.vertices, axis=0),
                       np.sort([[0.5, 0, 0], [0, 0.5, 0], [0, 0, 0.5]], axis=0))
    # normal points away from the negative corner
    assert m.face_normals()[0] @ np.ones(3) > 0


def test_plane_is_reconstructed_exactly():
    g = lattice(lambda p: p[:, 2] - 0.1, (-0.3, -0.3, -0.25), 0.05, (13, 13, 11))
    m = marching_cubes(g)
    assert len(m) > 0
    assert np.abs(m.vertices[:, 2] - 0.1).max() < 1e-6
    assert (m.face_normals()[:, 2] > 0).all()
    assert np.isclose(m.face_areas().sum(), 0.6 * 0.6)


@settings(max_examples=30, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(-0.2, 0.2))
def test_any_plane_is_exact(a, b, c, d):
    n = np.array([a, b, c])
    if np.linalg.norm(n) < 0.1:
        return
    n /= np.linalg.norm(n)
    g = lattice(lambda p: p @ n - d, (-0.5, -0.5, -0.5), 0.1, (11, 11, 11))
    m = marching_cubes(g)
    if len(m):
        assert np.abs(m.vertices @ n - d).max() < 1e-9
        nn = m.face_normals()
        assert (nn @ n > 0).all()


def test_sphere_within_one_cell():
    g = lattice(lambda p: np.linalg.norm(p, axis=1) - 0.5, (-0.7, -0.7, -0.7), 0.05, (29, 29, 29))
    m = marching_cubes(g)
    r = np.linalg.norm(m.vertices, axis=1)
    assert np.abs(r - 0.5).max() <= 0.05
    # closed 2-manifold with outward orientation
    assert (edge_counts(m) == 2).all() and directed_edges_unique(m)
    assert abs(signed_volume(m) - 4 / 3 * np.pi * 0.125) < 0.01
    verts, faces = len(m.vertices), len(m.faces)
    assert verts - faces // 2 * 3 + faces == 2  # Euler characteristic of a sphere


def test_matches_skimage_on_a_smooth_field():
    def f(p):
        return (np.linalg.norm(p - [0.05, -0.02, 0.0], axis=1) - 0.42
                + 0.05 * np.sin(7 * p[:, 0]) * np.cos(5 * p[:, 1]))
    g = lattice(f, (-0.6, -0.6, -0.6), 0.04, (31, 31, 31))
    m = marching_cubes(g)
    verts, _, _, _ = sk_marching_cubes(g.values, 0.0, spacing=(g.cell,) * 3)
    verts = verts + g.origin
    # same vertex set: one point per sign-changing lattice edge
    a = np.unique(np.round(m.vertices, 9), axis=0)
    b = np.unique(np.round(verts, 9), axis=0)
    assert len(a) == len(b)
    assert np.abs(a - b).max() < 1e-7
    assert abs(m.face_areas().sum() - sk_area(g)) / sk_area(g) < 0.01


def sk_area(g):
    verts, faces, _, _ = sk_marching_cubes(g.values, 0.0, spacing=(g.cell,) * 3)
    v = verts[faces]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1).sum()


@pytest.mark.parametrize("seed", range(5))
def test_random_fields_are_watertight_inside(seed):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=(9, 9, 9))
    # positive border keeps every surface closed inside the grid
    vals[[0, -1], :, :] = vals[:, [0, -1], :] = vals[:, :, [0, -1]] = 1.0
    g = SdfGrid(np.zeros(3), 0.1, (9, 9, 9), vals, np.ones((9, 9, 9), bool))
    m = marching_cubes(g)
    assert (edge_counts(m) == 2).all() and directed_edges_unique(m)
    assert signed_volume(m) < 0 or signed_volume(m) > 0  # non-degenerate


def test_sign_flip_reverses_orientation(rng):
    vals = rng.normal(size=(7, 7, 7))
    g = SdfGrid(np.zeros(3), 0.1, (7, 7, 7), vals, np.ones((7, 7, 7), bool))
    h = SdfGrid(np.zeros(3), 0.1, (7, 7, 7), -vals, np.ones((7, 7, 7), bool))
    a, b = marching_cubes(g), marching_cubes(h)
    va = np.unique(np.round(a.vertices, 9), axis=0)
    vb = np.unique(np.round(b.vertices, 9), axis=0)
    assert va.shape == vb.shape and np.abs(va - vb).max() < 1e-9
    # total oriented area flips
    assert np.allclose(a.face_normals().sum(0), -b.face_normals().sum(0), atol=1e-9)


def test_unoccupied_cells_emit_nothing():
    g = lattice(lambda p: p[:, 0] - 0.25, (0, 0, 0), 0.1, (6, 3, 3))
    full = marching_cubes(g)
    g.occupied[2] = False
    assert len(full) > 0 and len(marching_cubes(g)) == 0


# -- weld and cleanup ---------------------------------------------------------

def test_weld_merges_close_vertices():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1e-8, 0, 0], [1, 1e-8, 0], [1, 1, 0]], float)
    m = weld(v, [[0, 1, 2], [3, 5, 4]])
    assert len(m.vertices) == 4
    assert m.faces.tolist() == [[0, 1, 2], [0, 3, 1]]


def test_cleanup_drops_degenerate_faces_and_orphans():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0], [5, 5, 5]], float)
    m = TriMesh(v, [[0, 1, 2], [0, 1, 3], [1, 1, 2]]).cleanup()
    assert len(m) == 1 and len(m.vertices) == 3
    with pytest.raises(ValueError):
        TriMesh(v, [[0, 1, 7]])


# -- lattices over the voxel field ------------------------------------------

def test_sample_grid_one_voxel():
    store, bank, params = field_store(lambda p: p[:, 0] - 0.05, [(0, 0, 0)], Level.SPARSE)
    g = sample_sdf_grid(params, Level.SPARSE)
    assert g.dims == (3, 3, 3) and g.occupied.all()
    for x, v in zip(g.node_positions(), g.values.ravel()):
        assert abs(query(x, store, bank, "identity") - v) < 1e-9
    assert min(sample_sdf_grid(params, Level.DENSE).dims) == 0


def test_sample_grid_matches_pointwise_queries(rng):
    cells = rng.integers(-2, 2, (10, 3))
    store, bank, params = field_store(lambda p: np.sin(3 * p).sum(1) * 0.3, cells, Level.DENSE,
                                      activation="tanh")
    g = sample_sdf_grid(params, Level.DENSE)
    x = g.node_positions()
    occ = g.occupied.ravel()
    assert occ.sum() >= 27
    for i in rng.choice(np.flatnonzero(occ), 100, replace=False):
        assert abs(query(x[i], store, bank, "tanh") - g.values.ravel()[i]) < 1e-9
    assert (g.values.ravel()[~occ] == SdfGrid.OUTSIDE).all()


def test_extract_empty_and_single_level():
    store, bank, params = field_store(lambda p: p[:, 0], [], Level.DENSE)
    assert len(extract_mesh(params)) == 0
    cells = box_cells((-2, -2, -2), (2, 2, 2))
    store, bank, params = field_store(lambda p: p[:, 2] - 0.03, cells, Level.SPARSE)
    m = extract_mesh(params)
    ref = marching_cubes(sample_sdf_grid(params, Level.SPARSE))
    assert np.allclose(m.vertices, ref.vertices) and np.array_equal(m.faces, ref.faces)
    assert np.abs(m.vertices[:, 2] - 0.03).max() < 1e-9


def test_vertices_stay_near_allocated_voxels(rng):
    cells = rng.integers(-3, 3, (25, 3))
    store, bank, params = field_store(lambda p: np.linalg.norm(p, axis=1) - 0.25, cells,
                                      Level.DENSE)
    m = extract_mesh(params)
    assert len(m) > 0
    edge = 0.1
    lo = cells * edge - edge / 2
    hi = (cells + 1) * edge + edge / 2
    inside = ((m.vertices[:, None] >= lo - 1e-12) & (m.vertices[:, None] <= hi + 1e-12)).all(-1)
    assert inside.any(axis=1).all()


def test_mixed_level_sphere_within_one_dense_cell():
    radius = 0.5
    f = lambda p: np.linalg.norm(p, axis=1) - radius
    bank = VertexBank(seed=0)
    store = VoxelStore(0.2, bank=bank)
    # sparse shell everywhere, dense voxels over the upper half only
    for c in box_cells((-4, -4, -4), (4, 4, 4)):
        centre = (c + 0.5) * 0.2
        if abs(np.linalg.norm(centre) - radius) < 0.2:
            store.allocate(VoxelKey(*map(int, c), Level.SPARSE))
    for c in box_cells((-7, -7, 0), (7, 7, 7)):
        centre = (c + 0.5) * 0.1
        if abs(np.linalg.norm(centre) - radius) < 0.1:
            store.allocate(VoxelKey(*map(int, c), Level.DENSE))
    pos = np.zeros((len(bank), 3))
    for rec in store.records():
        pos[list(rec.vertex_ids)] = store.corner_positions(rec.key)
    bank.sdf_raw[:] = np.arctanh(np.clip(f(pos) / 0.2, -0.99, 0.99))
    params = make_params(store, bank)
    m = extract_mesh(params)
    d = np.abs(np.linalg.norm(m.vertices, axis=1) - radius)
    assert len(m) > 100 and d.max() <= 0.05
    # both levels contribute
    assert (m.vertices[:, 2] > 0.2).any() and (m.vertices[:, 2] < -0.2).any()
