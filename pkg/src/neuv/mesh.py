"""Mesh extraction: per-level SDF lattices and marching cubes.

The 256-case triangle table is generated at import time rather than typed
in.  For each cube configuration the iso-line segments on the six faces are
built, oriented so that triangles face positive SDF, chained into closed
loops and fan-triangulated.  Faces with two diagonal inside corners are
resolved by always cutting off the corners of the diagonal that holds the
face's lowest corner; the rule only looks at geometry, so a face shared by
two cubes is split the same way from both sides and the result is
watertight.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .field import FieldParams, eval_points
from .hashmv import CORNER_OFFSETS, Level

WELD_TOL = 1e-6
AREA_EPS = 1e-12

# edges of the unit cube as (corner_a, corner_b, axis), corner_b = corner_a + unit(axis)
CUBE_EDGES = [(a, a | (1 << ax), ax) for ax in range(3) for a in range(8) if not a & (1 << ax)]
_EDGE_OF = {frozenset(e[:2]): i for i, e in enumerate(CUBE_EDGES)}


def _cube_faces():
    """Six faces as (outward normal, 4 corners in cyclic order)."""
    faces = []
    for ax in range(3):
        u, v = [a for a in range(3) if a != ax]
        for side in (0, 1):
            base = side << ax
            ring = [base, base | (1 << u), base | (1 << u) | (1 << v), base | (1 << v)]
            n = np.zeros(3)
            n[ax] = 1.0 if side else -1.0
            faces.append((n, ring))
    return faces


_FACES = _cube_faces()


def _face_segments(case: int, normal, ring):
    """Oriented (edge_from, edge_to) segments of the iso-line on one face."""
    inside = [bool(case >> c & 1) for c in ring]
    cuts = []  # groups of ring positions that are cut off together
    n_in = sum(inside)
    if n_in in (0, 4):
        return []
    if n_in == 2 and inside[0] == inside[2]:
        # ambiguous: isolate both corners of the diagonal that holds the lowest corner
        lo = int(np.argmin(ring))
        cuts = [[lo], [(lo + 2) % 4]]
    elif n_in in (1, 3):
        odd = inside.index(n_in == 1)
        cuts = [[odd]]
    else:
        first = next(i for i in range(4) if inside[i] and not inside[i - 1])
        cuts = [[first, (first + 1) % 4]]
    segs = []
    for group in cuts:
        lo_i, hi_i = group[0], group[-1]
        ea = (ring[lo_i], ring[(lo_i - 1) % 4])
        eb = (ring[hi_i], ring[(hi_i + 1) % 4])
        # direction from inside to outside across the segment
        m = np.zeros(3)
        pts = []
        for c0, c1 in (ea, eb):
            p0, p1 = CORNER_OFFSETS[c0].astype(float), CORNER_OFFSETS[c1].astype(float)
            if not case >> c0 & 1:
                p0, p1 = p1, p0
            m += p1 - p0
            pts.append(0.5 * (CORNER_OFFSETS[c0] + CORNER_OFFSETS[c1]))
        i, j = _EDGE_OF[frozenset(ea)], _EDGE_OF[frozenset(eb)]
        tangent = np.cross(m, normal)
        if np.dot(pts[1] - pts[0], tangent) < 0:
            i, j = j, i
        segs.append((i, j))
    return segs


_FACE_EDGES = [frozenset(_EDGE_OF[frozenset((r[i], r[(i + 1) % 4]))] for i in range(4))
               for _, r in _FACES]


def _coplanar(a: int, b: int) -> bool:
    return any(a in f and b in f for f in _FACE_EDGES)


def _triangulate(loop: list):
    """Triangulate a closed loop of edge ids without any diagonal lying in a cube face.

    Fans are tried first (apex in loop order); otherwise a recursive split.
    """
    n = len(loop)
    if n == 3:
        return [tuple(loop)]
    for k in range(n):
        ring = loop[k:] + loop[:k]
        if not any(_coplanar(ring[0], ring[i]) for i in range(2, n - 1)):
            return [(ring[0], ring[i], ring[i + 1]) for i in range(1, n - 1)]
    for i in range(n):
        for j in range(i + 2, n - (i == 0)):
            if _coplanar(loop[i], loop[j]):
                continue
            left = _triangulate(loop[i:j + 1])
            right = _triangulate(loop[j:] + loop[:i + 1])
            if left is not None and right is not None:
                return left + right
    return None


def _case_triangles(case: int) -> list:
    nxt = {}
    for normal, ring in _FACES:
        for a, b in _face_segments(case, normal, ring):
            assert a not in nxt
            nxt[a] = b
    tris = []
    while nxt:
        start = min(nxt)
        loop = [start]
        e = nxt.pop(start)
        while e != start:
            loop.append(e)
            e = nxt.pop(e)
        k = loop.index(min(loop))
        loop = loop[k:] + loop[:k]
        tri = _triangulate(loop)
        if tri is None:
            raise RuntimeError(f"no face-free triangulation for case {case}")
        tris.extend(tri)
    return tris


def build_case_table():
    """(256, T, 3) int array of cube-edge triples, padded with -1."""
    cases = [_case_triangles(c) for c in range(256)]
    width = max(len(t) for t in cases)
    table = np.full((256, width, 3), -1, dtype=np.int64)
    for c, tris in enumerate(cases):
        if tris:
            table[c, :len(tris)] = tris
    return table


CASE_TABLE = build_case_table()
CASE_COUNTS = (CASE_TABLE[:, :, 0] >= 0).sum(axis=1)


@dataclass
class TriMesh:
    vertices: np.ndarray  # (n, 3)
    faces: np.ndarray     # (m, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self):
        return len(self.faces)

    def face_normals(self) -> np.ndarray:
        """Unnormalised normals; length is twice the face area."""
        v = self.vertices[self.faces]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def cleanup(self) -> "TriMesh":
        """Drop degenerate faces and unreferenced vertices."""
        f = self.faces
        ok = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
        f = f[ok]
        if len(f):
            f = f[TriMesh(self.vertices, f).face_areas() > AREA_EPS]
        used, inv = np.unique(f, return_inverse=True)
        return TriMesh(self.vertices[used], inv.reshape(-1, 3))

    def sample_points(self, n: int, rng) -> np.ndarray:
        """Area-weighted uniform samples on the surface."""
        area = self.face_areas()
        if len(area) == 0 or area.sum() <= 0:
            raise ValueError("cannot sample an empty mesh")
        face = rng.choice(len(area), size=n, p=area / area.sum())
        r1, r2 = rng.random(n), rng.random(n)
        s = np.sqrt(r1)
        a, b, c = (self.vertices[self.faces[face, k]] for k in range(3))
        return ((1 - s)[:, None] * a + (s * (1 - r2))[:, None] * b + (s * r2)[:, None] * c)


def weld(vertices: np.ndarray, faces: np.ndarray, tol: float = WELD_TOL) -> TriMesh:
    """Merge vertices closer than ``tol`` (transitively)."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    if len(vertices) == 0:
        return TriMesh.empty()
    pairs = cKDTree(vertices).query_pairs(tol, output_type="ndarray")
    n = len(vertices)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, label = connected_components(graph, directed=False)
    # representative = first vertex of each component
    first = np.full(label.max() + 1, n)
    np.minimum.at(first, label, np.arange(n))
    keep_order = np.argsort(first, kind="stable")
    remap = np.empty_like(keep_order)
    remap[keep_order] = np.arange(len(keep_order))
    return TriMesh(vertices[first[keep_order]], remap[label][np.asarray(faces, np.int64)])


@dataclass
class SdfGrid:
    origin: np.ndarray
    cell: float
    dims: tuple
    values: np.ndarray    # (nx, ny, nz) activated SDF; OUTSIDE where unoccupied
    occupied: np.ndarray  # (nx, ny, nz) bool
    cell_mask: Optional[np.ndarray] = None  # (nx-1, ny-1, nz-1) cells allowed to emit

    OUTSIDE = 1.0

    @classmethod
    def empty(cls) -> "SdfGrid":
        return cls(np.zeros(3), 1.0, (0, 0, 0), np.zeros((0, 0, 0)), np.zeros((0, 0, 0), bool))

    def node_positions(self) -> np.ndarray:
        idx = np.indices(self.dims).reshape(3, -1).T
        return self.origin + idx * self.cell


def sample_sdf_grid(params: FieldParams, level: Level, cell: Optional[float] = None) -> SdfGrid:
    """Sample the activated SDF of one level on a lattice over its voxels.

    Nodes on a voxel face may be claimed by either neighbour; values agree
    because neighbouring voxels share corner vertices.
    """
    idx = params.view.level(level)
    if len(idx.codes) == 0:
        return SdfGrid.empty()
    cell = idx.edge / 2.0 if cell is None else float(cell)
    if not cell > 0:
        raise ValueError("cell must be positive")
    lo, hi = idx.bounds()
    dims = tuple(int(d) for d in np.floor((hi - lo) / cell + 1e-9).astype(int) + 1)
    grid = SdfGrid(lo.astype(float), cell, dims, np.full(dims, SdfGrid.OUTSIDE), np.zeros(dims, bool))
    x = grid.node_positions()
    q = x / idx.edge
    near = np.abs(q - np.round(q)) < 1e-9
    base = np.where(near, np.round(q), np.floor(q)).astype(np.int64)
    row = np.full(len(x), -1, dtype=np.int64)
    for c in range(8):
        shift = CORNER_OFFSETS[c]
        if c and not np.any(np.all(near | (shift == 0), axis=1)):
            continue
        # a node on a plane also belongs to the voxel just below that plane
        cand = base - shift * near
        todo = (row < 0) & np.all(near | (shift == 0), axis=1)
        if todo.any():
            r = idx.lookup(cand[todo])
            sub = np.flatnonzero(todo)
            row[sub] = r
    occ = row >= 0
    if occ.any():
        pe = eval_points(params, x[occ], np.full(int(occ.sum()), int(level)), row[occ],
                         decode=False)
        vals = grid.values.reshape(-1)
        vals[np.flatnonzero(occ)] = pe.sdf
        grid.values = vals.reshape(dims)
    grid.occupied = occ.reshape(dims)
    return grid


def marching_cubes(grid: SdfGrid, iso: float = 0.0) -> TriMesh:
    """Triangulate the ``iso`` level set over cells whose 8 nodes are occupied."""
    if min(grid.dims) < 2:
        return TriMesh.empty()
    v, occ = grid.values, grid.occupied
    nx, ny, nz = grid.dims
    cshape = (nx - 1, ny - 1, nz - 1)
    corner_vals = np.empty(cshape + (8,))
    valid = np.ones(cshape, dtype=bool)
    for c, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        sl = (slice(ox, ox + nx - 1), slice(oy, oy + ny - 1), slice(oz, oz + nz - 1))
        corner_vals[..., c] = v[sl]
        valid &= occ[sl]
    if grid.cell_mask is not None:
        valid &= grid.cell_mask
    case = ((corner_vals < iso) << np.arange(8)).sum(axis=-1)
    valid &= (case > 0) & (case < 255)
    cells = np.argwhere(valid)
    if len(cells) == 0:
        return TriMesh.empty()
    case = case[valid]
    cvals = corner_vals[valid]
    ntri = CASE_COUNTS[case]
    cell_of_tri = np.repeat(np.arange(len(cells)), ntri)
    slot = np.arange(len(cell_of_tri)) - np.repeat(np.cumsum(ntri) - ntri, ntri)
    tri_edges = CASE_TABLE[case[cell_of_tri], slot]  # (T, 3) cube-edge ids

    edges = np.array(CUBE_EDGES)  # (12, 3) corner_a, corner_b, axis
    c_tri = np.repeat(cell_of_tri, 3)
    e_flat = tri_edges.ravel()
    start = cells[c_tri] + CORNER_OFFSETS[edges[e_flat, 0]]
    axis = edges[e_flat, 2]
    # one vertex per lattice edge, shared by every cell touching it
    key = (np.ravel_multi_index(start.T, grid.dims) * 3 + axis)
    ukey, first, inv = np.unique(key, return_index=True, return_inverse=True)
    va = cvals[c_tri[first], edges[e_flat[first], 0]]
    vb = cvals[c_tri[first], edges[e_flat[first], 1]]
    t = (iso - va) / (vb - va)
    p0 = grid.origin + start[first] * grid.cell
    step = np.zeros((len(first), 3))
    step[np.arange(len(first)), axis[first]] = grid.cell
    verts = p0 + t[:, None] * step
    # nodes lying exactly on the iso level put several edge vertices on one point
    return weld(verts, inv.reshape(-1, 3)).cleanup()


def extract_mesh(params: FieldParams, iso: float = 0.0) -> TriMesh:
    """Dense-level and sparse-level meshes merged, sparse cells under dense voxels skipped."""
    parts = []
    dense_idx = params.view.level(Level.DENSE)
    dense = sample_sdf_grid(params, Level.DENSE)
    if min(dense.dims) >= 2:
        parts.append(marching_cubes(dense, iso))
    sparse = sample_sdf_grid(params, Level.SPARSE)
    if min(sparse.dims) >= 2 and len(dense_idx.codes):
        cell_lo = np.indices(tuple(d - 1 for d in sparse.dims)).reshape(3, -1).T
        centers = sparse.origin + (cell_lo + 0.5) * sparse.cell
        under = dense_idx.lookup(np.floor(centers / dense_idx.edge).astype(np.int64)) >= 0
        # a sparse cell wider than a dense voxel: test its corners as well
        if sparse.cell > dense_idx.edge * (1 + 1e-9):
            for c in range(8):
                p = sparse.origin + (cell_lo + 0.25 + 0.5 * CORNER_OFFSETS[c]) * sparse.cell
                under |= dense_idx.lookup(np.floor(p / dense_idx.edge).astype(np.int64)) >= 0
        sparse.cell_mask = ~under.reshape(tuple(d - 1 for d in sparse.dims))
    if min(sparse.dims) >= 2:
        parts.append(marching_cubes(sparse, iso))
    parts = [p for p in parts if len(p)]
    if not parts:
        return TriMesh.empty()
    verts, faces, off = [], [], 0
    for p in parts:
        verts.append(p.vertices)
        faces.append(p.faces + off)
        off += len(p.vertices)
    return weld(np.concatenate(verts), np.concatenate(faces)).cleanup()
