"""Voxel-anchored SDF and colour features with a small colour decoder.

Each vertex stores a raw SDF scalar and an ``A``-dimensional colour
feature.  Points are queried by trilinear interpolation inside the voxel
that contains them; the interpolated SDF is then squashed by ``tanh``
(post-activation) and the interpolated feature is decoded to RGB.

Gradients are hand-derived for this fixed chain; see :func:`field_backward`.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .hashmv import CORNER_OFFSETS, Level, StoreView

FEATURE_DIM = 8
HIDDEN_DIM = 32
SDF_INIT = 0.1
FEAT_INIT = 0.01

SDF, COLOR = "sdf", "color"


class ContainmentError(ValueError):
    pass


class VertexBank:
    """Growable per-vertex parameter arrays."""

    def __init__(self, feature_dim: int = FEATURE_DIM, seed: int = 0,
                 sdf_init: float = SDF_INIT, feat_init: float = FEAT_INIT):
        self.feature_dim = feature_dim
        self.sdf_init = sdf_init
        self.feat_init = feat_init
        self.rng = np.random.default_rng(seed)
        self.sdf_raw = np.zeros(0)
        self.color_feat = np.zeros((0, feature_dim))
        self.level = np.zeros(0, dtype=np.int8)

    def __len__(self):
        return len(self.sdf_raw)

    def append(self, count: int, level: Level):
        feat = self.rng.uniform(-self.feat_init, self.feat_init,
                                size=(count, self.feature_dim))
        self.sdf_raw = np.concatenate([self.sdf_raw, np.full(count, self.sdf_init)])
        self.color_feat = np.concatenate([self.color_feat, feat])
        self.level = np.concatenate([self.level, np.full(count, int(level), np.int8)])

    def counts(self) -> dict:
        return {lvl: int((self.level == lvl).sum()) for lvl in Level}

    def copy(self) -> "VertexBank":
        other = VertexBank.__new__(VertexBank)
        other.__dict__.update(self.__dict__)
        other.rng = copy.deepcopy(self.rng)
        other.sdf_raw = self.sdf_raw.copy()
        other.color_feat = self.color_feat.copy()
        other.level = self.level.copy()
        return other


class Decoder:
    """Three fully connected layers: A -> H -> H -> 3, ReLU between, sigmoid out."""

    names = ("w1", "b1", "w2", "b2", "w3", "b3")

    def __init__(self, in_dim: int = FEATURE_DIM, hidden: int = HIDDEN_DIM,
                 seed: int = 0, params: Optional[dict] = None):
        self.in_dim = in_dim
        self.hidden = hidden
        if params is not None:
            self.params = {k: np.array(params[k], dtype=np.float64) for k in self.names}
            return
        rng = np.random.default_rng(seed)
        shapes = self.shapes()
        self.params = {}
        for name in self.names:
            fan_in = shapes["w" + name[1]][0]
            bound = 1.0 / np.sqrt(fan_in)
            self.params[name] = rng.uniform(-bound, bound, size=shapes[name])

    def shapes(self) -> dict:
        a, h = self.in_dim, self.hidden
        return {"w1": (a, h), "b1": (h,), "w2": (h, h), "b2": (h,),
                "w3": (h, 3), "b3": (3,)}

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self) -> "Decoder":
        return Decoder(self.in_dim, self.hidden, params=self.params)

    def forward(self, feat: np.ndarray):
        p = self.params
        z1 = feat @ p["w1"] + p["b1"]
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ p["w2"] + p["b2"]
        h2 = np.maximum(z2, 0.0)
        z3 = h2 @ p["w3"] + p["b3"]
        rgb = 1.0 / (1.0 + np.exp(-z3))
        return rgb, (feat, z1, h1, z2, h2, rgb)

    def backward(self, cache, g_rgb: np.ndarray):
        """Returns (parameter grads, grad w.r.t. input features)."""
        feat, z1, h1, z2, h2, rgb = cache
        p = self.params
        g3 = g_rgb * rgb * (1.0 - rgb)
        g_h2 = g3 @ p["w3"].T
        g2 = g_h2 * (z2 > 0)
        g_h1 = g2 @ p["w2"].T
        g1 = g_h1 * (z1 > 0)
        grads = {"w3": h2.T @ g3, "b3": g3.sum(0),
                 "w2": h1.T @ g2, "b2": g2.sum(0),
                 "w1": feat.T @ g1, "b1": g1.sum(0)}
        return grads, g1 @ p["w1"].T


def decode_color(feat, dec: Decoder) -> np.ndarray:
    feat = np.asarray(feat, dtype=np.float64)
    rgb, _ = dec.forward(feat.reshape(-1, dec.in_dim))
    return rgb.reshape(feat.shape[:-1] + (3,))


def activate_sdf(s_raw, activation: str = "tanh"):
    if activation == "tanh":
        return np.tanh(s_raw)
    if activation == "identity":
        return np.asarray(s_raw, dtype=np.float64) * 1.0
    raise ValueError(f"unknown activation {activation!r}")


def _activation_grad(s: np.ndarray, activation: str) -> np.ndarray:
    return 1.0 - s * s if activation == "tanh" else np.ones_like(s)


def trilinear_weights(local: np.ndarray):
    """Weights (n, 8) and their derivative w.r.t. local coords (n, 8, 3)."""
    local = np.asarray(local, dtype=np.float64).reshape(-1, 3)
    off = CORNER_OFFSETS.astype(np.float64)
    f = np.where(off[None], local[:, None, :], 1.0 - local[:, None, :])  # (n,8,3)
    sign = np.where(off > 0, 1.0, -1.0)
    w = f.prod(axis=2)
    dw = np.empty(f.shape)
    dw[..., 0] = sign[:, 0] * f[..., 1] * f[..., 2]
    dw[..., 1] = sign[:, 1] * f[..., 0] * f[..., 2]
    dw[..., 2] = sign[:, 2] * f[..., 0] * f[..., 1]
    return w, dw


def trilinear(x, rec, bank: VertexBank, edge_len: float, channel: str = SDF):
    """Interpolate one channel at x inside the voxel ``rec``."""
    x = np.asarray(x, dtype=np.float64)
    local = x / edge_len - np.array(rec.key[:3], dtype=np.float64)
    if np.any(local < -1e-9) or np.any(local > 1 + 1e-9):
        raise ContainmentError(f"{x!r} lies outside voxel {rec.key!r}")
    w, _ = trilinear_weights(np.clip(local, 0.0, 1.0))
    ids = np.asarray(rec.vertex_ids)
    if channel == SDF:
        return float(w[0] @ bank.sdf_raw[ids])
    if channel == COLOR:
        return w[0] @ bank.color_feat[ids]
    raise ValueError(f"unknown channel {channel!r}")


@dataclass
class FieldSample:
    x: np.ndarray
    level: Level
    sdf_raw: float
    sdf: float
    color_feat: np.ndarray
    weights: np.ndarray
    rgb: Optional[np.ndarray] = None


def sample_field(x, store, bank: VertexBank, activation: str = "tanh"):
    """Point query with dense priority; None outside every voxel."""
    found = store.locate(x)
    if found is None:
        return None
    rec, level = found
    edge = store.edge_len(level)
    x = np.asarray(x, dtype=np.float64)
    local = np.clip(x / edge - np.array(rec.key[:3], dtype=np.float64), 0.0, 1.0)
    w, _ = trilinear_weights(local)
    ids = np.asarray(rec.vertex_ids)
    s_raw = float(w[0] @ bank.sdf_raw[ids])
    return FieldSample(x=x, level=level, sdf_raw=s_raw,
                       sdf=float(activate_sdf(s_raw, activation)),
                       color_feat=w[0] @ bank.color_feat[ids], weights=w[0])


@dataclass
class FieldParams:
    """Everything the forward pass reads: voxel arrays plus learnable state."""
    view: StoreView
    sdf_raw: np.ndarray
    color_feat: np.ndarray
    decoder: Decoder
    activation: str = "tanh"

    def snapshot(self) -> "FieldParams":
        return FieldParams(self.view, self.sdf_raw.copy(), self.color_feat.copy(),
                           self.decoder.copy(), self.activation)


@dataclass
class PointEval:
    """Batched forward record for points that fell inside a voxel."""
    x: np.ndarray
    level: np.ndarray
    row: np.ndarray
    vids: np.ndarray
    w: np.ndarray
    dw_dx: np.ndarray
    sdf_raw: np.ndarray
    sdf: np.ndarray
    feat: np.ndarray
    rgb: np.ndarray
    cache: tuple = dc_field(repr=False, default=())
    decoded: Optional[np.ndarray] = None  # rows that went through the decoder (None = all)

    def decode(self, decoder: "Decoder", rows: np.ndarray):
        """Run the colour decoder on a subset of rows; other rows keep rgb = 0."""
        self.rgb = np.zeros((len(self.x), 3))
        self.rgb[rows], self.cache = decoder.forward(self.feat[rows])
        self.decoded = rows


def eval_points(params: FieldParams, x: np.ndarray, level=None, row=None,
                decode: bool = True) -> PointEval:
    """Evaluate the field at points that are known to be inside voxels.

    ``level``/``row`` may be passed to pin each point to a voxel (used to keep
    finite-difference checks on a fixed branch); otherwise they are located.
    Local coordinates are not clipped, so a pinned point slightly outside its
    voxel extrapolates linearly.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if level is None:
        level, row = params.view.locate(x)
        if np.any(level < 0):
            raise ContainmentError("points outside every voxel")
    n = len(x)
    vids = np.empty((n, 8), dtype=np.int64)
    base = np.empty((n, 3))
    edge = np.empty(n)
    for lvl in (Level.DENSE, Level.SPARSE):
        m = level == lvl
        if not m.any():
            continue
        idx = params.view.level(lvl)
        vids[m] = idx.vertex_ids[row[m]]
        base[m] = idx.keys[row[m]]
        edge[m] = idx.edge
    local = x / edge[:, None] - base
    w, dw = trilinear_weights(local)
    dw_dx = dw / edge[:, None, None]
    s_raw = np.einsum("nc,nc->n", w, params.sdf_raw[vids])
    s = activate_sdf(s_raw, params.activation)
    feat = np.einsum("nc,ncd->nd", w, params.color_feat[vids])
    if decode:
        rgb, cache = params.decoder.forward(feat)
    else:
        rgb, cache = np.zeros((n, 3)), ()
    return PointEval(x, level, row, vids, w, dw_dx, s_raw, s, feat, rgb, cache)


@dataclass
class FieldGrads:
    sdf_raw: np.ndarray
    color_feat: np.ndarray
    decoder: dict
    x: Optional[np.ndarray] = None


def field_backward(params: FieldParams, pe: PointEval, g_sdf: np.ndarray,
                   g_rgb: Optional[np.ndarray], need_x: bool = False,
                   need_params: bool = True) -> FieldGrads:
    """Chain rule from per-point dL/ds and dL/drgb back to every parameter.

    Vertex gradients scatter each point's upstream value to its 8 corners
    by the trilinear weights.  ``need_params=False`` skips the vertex and
    decoder reductions (pose-only use).
    """
    n_vert = len(params.sdf_raw)
    a = params.color_feat.shape[1]
    g_sdf = np.asarray(g_sdf, dtype=np.float64)
    g_sraw = g_sdf * _activation_grad(pe.sdf, params.activation)
    if g_rgb is not None and len(pe.cache):
        if pe.decoded is None:
            g_dec, g_feat = params.decoder.backward(pe.cache, g_rgb)
        else:
            g_dec, g_sub = params.decoder.backward(pe.cache, g_rgb[pe.decoded])
            g_feat = np.zeros((len(pe.x), a))
            g_feat[pe.decoded] = g_sub
    else:
        g_dec = {k: np.zeros_like(v) for k, v in params.decoder.params.items()}
        g_feat = np.zeros((len(pe.x), a))
    g_vs = g_vc = None
    if need_params:
        flat = pe.vids.ravel()
        g_vs = np.bincount(flat, weights=(pe.w * g_sraw[:, None]).ravel(), minlength=n_vert)
        g_vc = np.empty((n_vert, a))
        for ch in range(a):
            g_vc[:, ch] = np.bincount(flat, weights=(pe.w * g_feat[:, ch:ch + 1]).ravel(),
                                      minlength=n_vert)
    g_x = None
    if need_x:
        # d s_raw/dx = sum_c V_c dw_c/dx ; d feat/dx likewise
        ds_dx = np.einsum("nc,nck->nk", params.sdf_raw[pe.vids], pe.dw_dx)
        g_x = g_sraw[:, None] * ds_dx
        vf = params.color_feat[pe.vids]  # (n,8,a)
        g_x += np.einsum("nc,nck->nk", np.einsum("nca,na->nc", vf, g_feat), pe.dw_dx)
    return FieldGrads(g_vs, g_vc, g_dec, g_x)
