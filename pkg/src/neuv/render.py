"""Ray traversal, multiresolution sampling and SDF-weighted rendering.

Per ray, both lattices are walked cell by cell; runs of allocated cells
become intervals, each interval is sampled every ``step`` meters at
mid-cell offsets, and the dense and sparse samples are merged by depth.
Rendered depth and colour are normalised weighted sums with per-sample
weight ``sigmoid(s/st) * sigmoid(-s/st)``.

Depths here are distances along unit rays, not camera z.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .field import FieldParams, PointEval, eval_points, field_backward
from .hashmv import Level, LevelIndex, StoreView


@dataclass
class RenderConfig:
    step: float = 0.1
    truncation: float = 0.05
    t_min: float = 0.05
    t_max: float = 8.0
    max_samples_per_ray: int = 256
    hit_eps: float = 1e-6

    def __post_init__(self):
        if not (self.step > 0 and self.truncation > 0):
            raise ValueError("step and truncation must be positive")
        if not self.t_min < self.t_max:
            raise ValueError("t_min must be below t_max")
        if self.max_samples_per_ray < 1:
            raise ValueError("max_samples_per_ray must be >= 1")


# ---------------------------------------------------------------------------
# traversal


def _slab(lo, hi, origins, dirs):
    """Entry/exit distances of rays against one AABB (vectorised)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    parallel = dirs == 0
    inside = (origins >= lo) & (origins <= hi)
    tn = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t0, t1))
    tf = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t0, t1))
    return tn.max(axis=1), tf.min(axis=1)


def traverse_batch(idx: LevelIndex, origins, dirs, t_min: float, t_max: float):
    """Walk one lattice for many rays at once.

    Returns flat arrays ``(ray, t_enter, t_exit)`` of coalesced intervals over
    allocated cells, ordered by ray then depth.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    none = (np.zeros(0, np.int64), np.zeros(0), np.zeros(0))
    bounds = idx.bounds()
    if bounds is None or len(origins) == 0:
        return none
    lo, hi = bounds
    tn, tf = _slab(lo, hi, origins, dirs)
    t_start = np.maximum(tn, t_min)
    t_end = np.minimum(tf, t_max)
    rays = np.flatnonzero(t_start < t_end)
    if rays.size == 0:
        return none
    o, d = origins[rays], dirs[rays]
    t_start, t_end = t_start[rays], t_end[rays]
    edge = idx.edge
    kmin, kmax = idx.keys.min(axis=0), idx.keys.max(axis=0)
    cell = np.floor((o + t_start[:, None] * d) / edge).astype(np.int64)
    cell = np.clip(cell, kmin, kmax)
    step = np.where(d > 0, 1, -1).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_max_ax = np.where(d != 0, ((cell + (d > 0)) * edge - o) / d, np.inf)
        t_delta = np.where(d != 0, edge / np.abs(d), np.inf)

    seg_ray, seg_step, seg_in, seg_out, seg_occ = [], [], [], [], []
    t_cur = t_start.copy()
    act = np.arange(len(rays))
    n_iter = 0
    max_iter = int((kmax - kmin + 1).sum()) + 4
    while act.size and n_iter < max_iter:
        tm = t_max_ax[act]
        axis = np.argmin(tm, axis=1)
        t_next = tm[np.arange(act.size), axis]
        t_out = np.minimum(t_next, t_end[act])
        occ = idx.lookup(cell[act]) >= 0
        seg_ray.append(act)
        seg_step.append(np.full(act.size, n_iter))
        seg_in.append(t_cur[act])
        seg_out.append(t_out)
        seg_occ.append(occ)
        cell[act, axis] += step[act, axis]
        t_max_ax[act, axis] += t_delta[act, axis]
        t_cur[act] = t_next
        act = act[t_next < t_end[act]]
        n_iter += 1

    ray = np.concatenate(seg_ray)
    order = np.lexsort((np.concatenate(seg_step), ray))
    ray = ray[order]
    t_in = np.concatenate(seg_in)[order]
    t_out = np.concatenate(seg_out)[order]
    occ = np.concatenate(seg_occ)[order]
    nonzero = t_out > t_in
    ray, t_in, t_out, occ = ray[nonzero], t_in[nonzero], t_out[nonzero], occ[nonzero]
    prev_same = np.r_[False, (ray[1:] == ray[:-1]) & occ[:-1]]
    next_same = np.r_[(ray[:-1] == ray[1:]) & occ[1:], False]
    starts = occ & ~prev_same
    ends = occ & ~next_same
    return rays[ray[starts]], t_in[starts], t_out[ends]


def traverse(ray, store, level: Level, cfg: Optional[RenderConfig] = None):
    """Intervals ``[(t_enter, t_exit), ...]`` of one ray through one level."""
    cfg = cfg or RenderConfig()
    view = store.view() if hasattr(store, "view") else store
    _, t_in, t_out = traverse_batch(view.level(level), np.asarray(ray.origin)[None],
                                    np.asarray(ray.direction)[None], cfg.t_min, cfg.t_max)
    return list(zip(t_in.tolist(), t_out.tolist()))


# ---------------------------------------------------------------------------
# sampling


def sample_flat(ray, t_in, t_out, step: float, cap: int):
    """Mid-cell samples ``t_in + (k + 1/2) step`` inside every interval.

    Inputs are flat per-interval arrays ordered by ray; the earliest ``cap``
    samples of each ray are kept.
    """
    x = (t_out - t_in) / step - 0.5
    cnt = np.where(x > 0, np.ceil(x), 0).astype(np.int64)
    total = int(cnt.sum())
    if total == 0:
        return np.zeros(0, np.int64), np.zeros(0)
    rep = np.repeat(np.arange(len(cnt)), cnt)
    k = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    t = t_in[rep] + (k + 0.5) * step
    r = ray[rep]
    ok = t < t_out[rep]
    r, t = r[ok], t[ok]
    first = np.r_[True, r[1:] != r[:-1]]
    group_start = np.maximum.accumulate(np.where(first, np.arange(len(r)), 0))
    keep = (np.arange(len(r)) - group_start) < cap
    return r[keep], t[keep]


def sample_intervals(intervals, step: float, cap: int = 256) -> list:
    """Sample depths for one ray's ``[(t_enter, t_exit), ...]``."""
    if not intervals:
        return []
    iv = np.asarray(intervals, dtype=np.float64).reshape(-1, 2)
    _, t = sample_flat(np.zeros(len(iv), np.int64), iv[:, 0], iv[:, 1], step, cap)
    return t.tolist()


def merge_sorted(dense, sparse) -> list:
    """Merge two ascending depth lists into ``[(depth, Level), ...]``.

    Exact ties keep the dense sample first.
    """
    out = []
    i = j = 0
    while i < len(dense) and j < len(sparse):
        if dense[i] <= sparse[j]:
            out.append((dense[i], Level.DENSE))
            i += 1
        else:
            out.append((sparse[j], Level.SPARSE))
            j += 1
    out.extend((d, Level.DENSE) for d in dense[i:])
    out.extend((s, Level.SPARSE) for s in sparse[j:])
    return out


@dataclass
class SampleSet:
    n_rays: int
    ray: np.ndarray
    t: np.ndarray
    level: np.ndarray  # lattice the sample was drawn from


def sample_rays(view: StoreView, origins, dirs, cfg: RenderConfig) -> SampleSet:
    """Traverse both levels, sample, and merge per ray by depth."""
    parts = []
    for level in (Level.DENSE, Level.SPARSE):
        r, ti, to = traverse_batch(view.level(level), origins, dirs, cfg.t_min, cfg.t_max)
        r, t = sample_flat(r, ti, to, cfg.step, cfg.max_samples_per_ray)
        parts.append((r, t, np.full(len(r), int(level), np.int64)))
    ray = np.concatenate([p[0] for p in parts])
    t = np.concatenate([p[1] for p in parts])
    lvl = np.concatenate([p[2] for p in parts])
    order = np.lexsort((lvl, t, ray))
    return SampleSet(len(origins), ray[order], t[order], lvl[order])


# ---------------------------------------------------------------------------
# weights and compositing


def render_weights(s, st: float):
    """``sigmoid(s/st) * sigmoid(-s/st)``, evaluated without overflow."""
    e = np.exp(-np.abs(np.asarray(s, dtype=np.float64) / st))
    return e / (1.0 + e) ** 2


def render_weights_grad(s, st: float):
    a = np.asarray(s, dtype=np.float64) / st
    return -render_weights(s, st) * np.tanh(0.5 * a) / st


def render_ray(depths, sdf, colors, st: float, eps: float = 1e-6):
    """Normalised weighted depth/colour for one ray -> (D, C, hit)."""
    d = np.asarray(depths, dtype=np.float64)
    c = np.asarray(colors, dtype=np.float64).reshape(len(d), 3)
    o = render_weights(sdf, st)
    w = o.sum()
    if not w > eps:
        return float("nan"), np.full(3, np.nan), False
    return float(o @ d / w), (o @ c) / w, True


@dataclass
class RenderOutput:
    n_rays: int
    origins: np.ndarray
    dirs: np.ndarray
    ray: np.ndarray
    t: np.ndarray
    pe: PointEval
    o: np.ndarray
    keep: np.ndarray
    weight_sum: np.ndarray
    depth: np.ndarray
    rgb: np.ndarray
    hit: np.ndarray
    truncation: float


def truncate_behind_surface(ray, t, s, n_rays: int, st: float) -> np.ndarray:
    """Keep mask dropping samples more than ``st`` past the first s < 0."""
    neg = s < 0
    t_neg = np.full(n_rays, np.inf)
    if neg.any():
        r_neg = ray[neg]
        first = np.r_[True, r_neg[1:] != r_neg[:-1]]
        t_neg[r_neg[first]] = t[neg][first]
    return t <= t_neg[ray] + st


def render_rays(params: FieldParams, origins, dirs, cfg: RenderConfig,
                samples: Optional[SampleSet] = None, pinned=None, keep=None,
                decode: bool = True) -> RenderOutput:
    """Forward pass for a batch of rays.

    ``samples`` / ``pinned`` (voxel level+row per sample) / ``keep`` can be
    supplied to freeze the discrete choices of a previous pass.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    if samples is None:
        samples = sample_rays(params.view, origins, dirs, cfg)
    ray, t = samples.ray, samples.t
    x = origins[ray] + t[:, None] * dirs[ray]
    if pinned is None:
        level, row = params.view.locate(x)
        inside = level >= 0
        if not inside.all():
            ray, t, x = ray[inside], t[inside], x[inside]
            level, row = level[inside], row[inside]
    else:
        level, row = pinned
    pe = eval_points(params, x, level, row, decode=False)
    if keep is None:
        keep = truncate_behind_surface(ray, t, pe.sdf, n, cfg.truncation)
    if decode:
        # dropped samples carry zero weight, so their colour is never needed
        pe.decode(params.decoder, np.flatnonzero(keep))
    o = render_weights(pe.sdf, cfg.truncation) * keep
    w = np.bincount(ray, weights=o, minlength=n)
    hit = w > cfg.hit_eps
    safe = np.where(hit, w, 1.0)
    depth = np.bincount(ray, weights=o * t, minlength=n) / safe
    rgb = np.stack([np.bincount(ray, weights=o * pe.rgb[:, k], minlength=n)
                    for k in range(3)], axis=1) / safe[:, None]
    depth[~hit] = 0.0
    rgb[~hit] = 0.0
    return RenderOutput(n, origins, dirs, ray, t, pe, o, keep, w, depth, rgb, hit,
                        cfg.truncation)


def render_backward(params: FieldParams, out: RenderOutput, g_depth, g_rgb,
                    g_sdf_extra=None, need_pose: bool = False, need_params: bool = True):
    """Back-propagate ray-level gradients to the field (and optionally pose).

    Returns ``(FieldGrads, pose_grad)`` where ``pose_grad`` is the gradient
    with respect to a left-multiplied twist ``[omega; v]`` at zero.
    """
    r = out.ray
    hit_r = out.hit[r]
    inv_w = np.where(hit_r, 1.0 / np.where(out.hit, out.weight_sum, 1.0)[r], 0.0)
    g_depth = np.asarray(g_depth, dtype=np.float64)
    g_rgb = np.asarray(g_rgb, dtype=np.float64)
    g_o = g_depth[r] * (out.t - out.depth[r])
    g_o += np.einsum("nk,nk->n", g_rgb[r], out.pe.rgb - out.rgb[r])
    g_o *= inv_w * out.keep
    g_s = g_o * render_weights_grad(out.pe.sdf, out.truncation)
    if g_sdf_extra is not None:
        g_s = g_s + g_sdf_extra
    g_c = g_rgb[r] * (out.o * inv_w)[:, None]
    grads = field_backward(params, out.pe, g_s, g_c, need_x=need_pose,
                           need_params=need_params)
    pose_grad = None
    if need_pose:
        x = out.pe.x
        pose_grad = np.concatenate([np.cross(x, grads.x).sum(0), grads.x.sum(0)])
    return grads, pose_grad


def render_image(params: FieldParams, cam, pose, cfg: RenderConfig, chunk: int = 4096):
    """Full-frame render -> (rgb (H, W, 3), z-depth (H, W), hit (H, W))."""
    from .geometry import pixel_rays
    v, u = np.mgrid[0:cam.height, 0:cam.width]
    o, d, scale = pixel_rays(u.ravel(), v.ravel(), cam, pose)
    n = len(o)
    rgb = np.zeros((n, 3))
    depth = np.zeros(n)
    hit = np.zeros(n, bool)
    for a in range(0, n, chunk):
        out = render_rays(params, o[a:a + chunk], d[a:a + chunk], cfg)
        rgb[a:a + chunk] = out.rgb
        depth[a:a + chunk] = out.depth / scale[a:a + chunk]
        hit[a:a + chunk] = out.hit
    shape = (cam.height, cam.width)
    return rgb.reshape(shape + (3,)), depth.reshape(shape), hit.reshape(shape)
