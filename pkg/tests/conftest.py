import sys

import numpy as np
import pytest

from neuv.field import Decoder, FieldParams, VertexBank
from neuv.geometry import Camera
from neuv.hashmv import Level, VoxelKey, VoxelStore


def random_store(rng, n_sparse=4, n_dense=4, edge=0.2, spread=2):
    """A small two-level store with random (clustered) voxels and a bank."""
    bank = VertexBank(seed=int(rng.integers(1 << 30)))
    store = VoxelStore(edge, bank=bank)
    for level, n in ((Level.SPARSE, n_sparse), (Level.DENSE, n_dense)):
        scale = 1 if level == Level.SPARSE else 2
        for _ in range(n):
            ijk = rng.integers(-spread * scale, spread * scale, size=3)
            store.allocate(VoxelKey(*map(int, ijk), level))
    return store, bank


def randomize(bank, decoder, rng, sdf_scale=0.5, feat_scale=0.5):
    bank.sdf_raw[:] = rng.normal(0.0, sdf_scale, len(bank))
    bank.color_feat[:] = rng.normal(0.0, feat_scale, bank.color_feat.shape)
    for k, v in decoder.params.items():
        v[...] = rng.normal(0.0, 0.5, v.shape)


def make_params(store, bank, decoder=None, activation="tanh"):
    decoder = decoder or Decoder(bank.feature_dim, seed=0)
    return FieldParams(store.view(), bank.sdf_raw, bank.color_feat, decoder, activation)


def rays_into(rng, lo, hi, n, dist=1.5):
    """Rays from outside the box [lo, hi] aimed at random interior points."""
    target = rng.uniform(lo, hi, size=(n, 3))
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    origin = target - dist * d
    return origin, d


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cam():
    return Camera(40.0, 40.0, 19.5, 14.5, 40, 30)


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is not None and acc.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acc.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
