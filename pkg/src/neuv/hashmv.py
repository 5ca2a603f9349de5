"""Hash-managed two-resolution voxel store with shared vertex numbering.

Voxels live on two lattices: sparse cells of edge ``v`` and dense cells of
edge ``v / 2``.  Each voxel record carries eight vertex ids in a fixed
corner order, corner ``c`` sitting at offset ``(c & 1, (c >> 1) & 1,
(c >> 2) & 1)``.  Ids are shared between voxels of the same level that
touch; they are never shared across levels.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

CORNER_OFFSETS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1]
                           for c in range(8)], dtype=np.int64)

_NEIGHBOR_OFFSETS = [(dx, dy, dz)
                     for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
                     if (dx, dy, dz) != (0, 0, 0)]

_CODE_BIAS = 1 << 20
_CODE_BITS = 21


class Level(enum.IntEnum):
    DENSE = 0
    SPARSE = 1


class VoxelKey(NamedTuple):
    ix: int
    iy: int
    iz: int
    level: Level


@dataclass(frozen=True)
class VoxelRecord:
    key: VoxelKey
    vertex_ids: tuple


@dataclass
class AllocationStats:
    new_sparse: int = 0
    new_dense: int = 0
    discarded: int = 0


def voxel_key(p, edge_len: float, level: Level = Level.SPARSE) -> VoxelKey:
    ijk = np.floor(np.asarray(p, dtype=np.float64) / edge_len).astype(np.int64)
    return VoxelKey(int(ijk[0]), int(ijk[1]), int(ijk[2]), Level(level))


def encode_keys(ijk: np.ndarray) -> np.ndarray:
    """Pack integer lattice coordinates (..., 3) into sortable int64 codes."""
    b = np.asarray(ijk, dtype=np.int64) + _CODE_BIAS
    return (b[..., 0] << (2 * _CODE_BITS)) | (b[..., 1] << _CODE_BITS) | b[..., 2]


class LevelIndex(NamedTuple):
    """Immutable array view of one level, sorted by key code."""
    edge: float
    codes: np.ndarray      # (n,) sorted int64
    keys: np.ndarray       # (n, 3) lattice coords, same order
    vertex_ids: np.ndarray  # (n, 8)

    def lookup(self, ijk: np.ndarray) -> np.ndarray:
        """Row of each lattice cell (..., 3), or -1 when unallocated."""
        codes = encode_keys(ijk)
        if len(self.codes) == 0:
            return np.full(codes.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self.codes, codes)
        pos = np.minimum(pos, len(self.codes) - 1)
        return np.where(self.codes[pos] == codes, pos, -1)

    def bounds(self):
        """Lattice AABB as (lo, hi) world corners, or None when empty."""
        if len(self.codes) == 0:
            return None
        return self.keys.min(axis=0) * self.edge, (self.keys.max(axis=0) + 1) * self.edge


class StoreView(NamedTuple):
    """Snapshot of the voxel map: one :class:`LevelIndex` per level."""
    dense: LevelIndex
    sparse: LevelIndex

    def level(self, level: Level) -> LevelIndex:
        return self.dense if level == Level.DENSE else self.sparse

    def locate(self, x: np.ndarray):
        """Dense-priority containment for points (n, 3).

        Returns ``(level, row)`` arrays; level is -1 where no voxel holds x.
        """
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        level = np.full(len(x), -1, dtype=np.int64)
        row = np.full(len(x), -1, dtype=np.int64)
        for lvl in (Level.SPARSE, Level.DENSE):
            idx = self.level(lvl)
            r = idx.lookup(np.floor(x / idx.edge).astype(np.int64))
            hit = r >= 0
            level[hit] = lvl
            row[hit] = r[hit]
        return level, row


class VoxelStore:
    """Two-level voxel map keyed by :class:`VoxelKey`.

    ``bank`` (optional) receives ``append(count, level)`` calls whenever
    fresh vertices are numbered.
    """

    def __init__(self, sparse_edge_len: float = 0.2, bank=None):
        if not sparse_edge_len > 0:
            raise ValueError("edge length must be positive")
        self.sparse_edge_len = float(sparse_edge_len)
        self.dense_edge_len = self.sparse_edge_len / 2.0
        self.voxel_map: dict[VoxelKey, VoxelRecord] = {}
        self.bank = bank
        self.n_vertices = 0
        self._order: dict[Level, list] = {Level.DENSE: [], Level.SPARSE: []}
        self._index: Optional[StoreView] = None

    @classmethod
    def restore(cls, sparse_edge_len: float, records, n_vertices: int) -> "VoxelStore":
        """Rebuild a store from ``(key, vertex_ids)`` pairs in allocation order."""
        store = cls(sparse_edge_len)
        for key, ids in records:
            key = VoxelKey(int(key[0]), int(key[1]), int(key[2]), Level(key[3]))
            ids = tuple(int(i) for i in ids)
            if key in store.voxel_map:
                raise ValueError(f"duplicate voxel {key!r}")
            if len(ids) != 8 or min(ids) < 0 or max(ids) >= n_vertices:
                raise ValueError(f"bad vertex ids for {key!r}")
            store.voxel_map[key] = VoxelRecord(key, ids)
            store._order[key.level].append(key)
        store.n_vertices = int(n_vertices)
        return store

    def edge_len(self, level: Level) -> float:
        return self.dense_edge_len if level == Level.DENSE else self.sparse_edge_len

    def __len__(self):
        return len(self.voxel_map)

    def count(self, level: Level) -> int:
        return len(self._order[level])

    def __contains__(self, key) -> bool:
        return key in self.voxel_map

    def records(self, level: Optional[Level] = None):
        if level is None:
            return list(self.voxel_map.values())
        return [self.voxel_map[k] for k in self._order[level]]

    def corner_positions(self, key: VoxelKey) -> np.ndarray:
        base = np.array(key[:3], dtype=np.int64)
        return (base + CORNER_OFFSETS) * self.edge_len(key.level)

    def neighbor_voxels(self, key: VoxelKey) -> list:
        out = []
        for dx, dy, dz in _NEIGHBOR_OFFSETS:
            rec = self.voxel_map.get(
                VoxelKey(key.ix + dx, key.iy + dy, key.iz + dz, key.level))
            if rec is not None:
                out.append(rec)
        return out

    def allocate(self, key: VoxelKey) -> VoxelRecord:
        """Allocate ``key``, sharing corner ids with same-level neighbours."""
        if key in self.voxel_map:
            return self.voxel_map[key]
        ids = [-1] * 8
        for nb in self.neighbor_voxels(key):
            d = (nb.key.ix - key.ix, nb.key.iy - key.iy, nb.key.iz - key.iz)
            for c2, vid in enumerate(nb.vertex_ids):
                ox = d[0] + (c2 & 1)
                oy = d[1] + ((c2 >> 1) & 1)
                oz = d[2] + ((c2 >> 2) & 1)
                if 0 <= ox <= 1 and 0 <= oy <= 1 and 0 <= oz <= 1:
                    ids[ox | (oy << 1) | (oz << 2)] = vid
        fresh = 0
        for c in range(8):
            if ids[c] < 0:
                ids[c] = self.n_vertices + fresh
                fresh += 1
        self.n_vertices += fresh
        if fresh and self.bank is not None:
            self.bank.append(fresh, key.level)
        rec = VoxelRecord(key, tuple(ids))
        self.voxel_map[key] = rec
        self._order[key.level].append(key)
        self._index = None
        return rec

    def insert_points(self, points, is_edge) -> AllocationStats:
        """First-come-first-served allocation; edge points are processed first.

        A point is discarded when either the dense or the sparse cell that
        contains it is already allocated.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        is_edge = np.asarray(is_edge, dtype=bool).reshape(-1)
        stats = AllocationStats()
        if len(points) == 0:
            return stats
        order = np.argsort(~is_edge, kind="stable")
        dk = np.floor(points / self.dense_edge_len).astype(np.int64)
        sk = np.floor(points / self.sparse_edge_len).astype(np.int64)
        vmap = self.voxel_map
        for i in order.tolist():
            dkey = VoxelKey(int(dk[i, 0]), int(dk[i, 1]), int(dk[i, 2]), Level.DENSE)
            skey = VoxelKey(int(sk[i, 0]), int(sk[i, 1]), int(sk[i, 2]), Level.SPARSE)
            if dkey in vmap or skey in vmap:
                stats.discarded += 1
            elif is_edge[i]:
                self.allocate(dkey)
                stats.new_dense += 1
            else:
                self.allocate(skey)
                stats.new_sparse += 1
        return stats

    def locate(self, x) -> Optional[tuple]:
        """Dense voxel containing x if any, else the sparse one, else None."""
        x = np.asarray(x, dtype=np.float64)
        for level in (Level.DENSE, Level.SPARSE):
            rec = self.voxel_map.get(voxel_key(x, self.edge_len(level), level))
            if rec is not None:
                return rec, level
        return None

    def view(self) -> StoreView:
        """Array snapshot of the map.  Later insertions do not alter it."""
        if self._index is None:
            levels = []
            for level in (Level.DENSE, Level.SPARSE):
                keys = self._order[level]
                if keys:
                    ijk = np.array([k[:3] for k in keys], dtype=np.int64)
                    vids = np.array([self.voxel_map[k].vertex_ids for k in keys],
                                    dtype=np.int64)
                else:
                    ijk = np.zeros((0, 3), dtype=np.int64)
                    vids = np.zeros((0, 8), dtype=np.int64)
                codes = encode_keys(ijk)
                srt = np.argsort(codes, kind="stable")
                levels.append(LevelIndex(self.edge_len(level), codes[srt],
                                         ijk[srt], vids[srt]))
            self._index = StoreView(*levels)
        return self._index

    def dump(self) -> str:
        """One line per voxel in allocation order: ``level ix iy iz n_shared ids``."""
        lines = [f"# sparse_edge={self.sparse_edge_len!r} dense_edge={self.dense_edge_len!r} "
                 f"voxels={len(self)} vertices={self.n_vertices}"]
        for level in (Level.DENSE, Level.SPARSE):
            for key in self._order[level]:
                ids = self.voxel_map[key].vertex_ids
                tag = "D" if level == Level.DENSE else "S"
                lines.append(f"{tag} {key.ix} {key.iy} {key.iz} {len(set(ids))} "
                             + " ".join(map(str, ids)))
        return "\n".join(lines) + "\n"
