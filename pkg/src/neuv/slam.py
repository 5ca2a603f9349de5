"""Alternating tracking and mapping over the voxel field."""

from __future__ import annotations

import logging
import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .edge_prior import CANNY_HIGH, CANNY_LOW, POINT_STRIDE, canny, label_cloud, to_gray
from .field import FEATURE_DIM, HIDDEN_DIM, SDF_INIT, Decoder, FieldParams, VertexBank
from .geometry import Camera, Pose, pixel_rays, se3_exp
from .hashmv import AllocationStats, VoxelStore
from .render import RenderConfig, RenderOutput, render_backward, render_rays
from .synth import Frame

log = logging.getLogger(__name__)

# residuals this small are rounding noise; their L1 subgradient is taken as 0
L1_DEADBAND = 1e-12


@dataclass
class FieldConfig:
    sparse_edge: float = 0.2
    feature_dim: int = FEATURE_DIM
    hidden_dim: int = HIDDEN_DIM
    sdf_init: float = SDF_INIT
    activation: str = "tanh"


@dataclass
class EdgeConfig:
    canny_low: float = CANNY_LOW
    canny_high: float = CANNY_HIGH
    point_stride: int = POINT_STRIDE


@dataclass
class LossConfig:
    color: float = 1.0
    depth: float = 1.0
    sdf: float = 1.0
    free_space: float = 0.0


@dataclass
class SlamConfig:
    map_rays: int = 2048
    track_rays: int = 1024
    tracking_iterations: int = 20
    mapping_iterations: int = 15
    warmup_iterations: int = 30
    refine_iterations: int = 0  # keyframe-only mapping steps after the last frame
    lr_pose: float = 1e-3
    lr_pose_final: float = 1.0  # pose lr on the last tracking iteration, as a fraction
    lr_sdf: float = 0.1
    lr_feat: float = 0.05
    lr_decoder: float = 1e-2
    keyframe_interval: int = 10
    keyframe_share: float = 0.5
    checkpoint_interval: int = 0
    use_gt_first_pose: bool = True
    seed: int = 0
    field: FieldConfig = dataclasses.field(default_factory=FieldConfig)
    edge: EdgeConfig = dataclasses.field(default_factory=EdgeConfig)
    loss: LossConfig = dataclasses.field(default_factory=LossConfig)
    render: RenderConfig = dataclasses.field(default_factory=RenderConfig)

    def __post_init__(self):
        for name in ("map_rays", "track_rays", "tracking_iterations",
                     "mapping_iterations", "keyframe_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.warmup_iterations < 0 or self.refine_iterations < 0:
            raise ValueError("warmup_iterations and refine_iterations must be >= 0")
        for name in ("lr_pose", "lr_sdf", "lr_feat", "lr_decoder"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 < self.lr_pose_final <= 1.0:
            raise ValueError("lr_pose_final must lie in (0, 1]")
        if not 0.0 <= self.keyframe_share <= 1.0:
            raise ValueError("keyframe_share must lie in [0, 1]")


@dataclass
class LossBreakdown:
    color_l1: float = 0.0
    depth_l1: float = 0.0
    sdf_term: float = 0.0
    free_space: float = 0.0
    total: float = 0.0
    ray_count: int = 0


@dataclass
class LossGrads:
    depth: np.ndarray
    rgb: np.ndarray
    sdf: np.ndarray


def _l1_grad(r: np.ndarray) -> np.ndarray:
    return np.where(np.abs(r) > L1_DEADBAND, np.sign(r), 0.0)


def compute_loss(out: RenderOutput, gt_rgb, gt_t, weights: Optional[LossConfig] = None):
    """Colour L1 + depth L1 + in-band SDF regression over supervised rays.

    ``gt_t`` is the ground-truth distance along each ray (0 = no depth).
    Returns ``(LossBreakdown, LossGrads)``; grads are None when no ray is
    both hit and supervised.
    """
    weights = weights or LossConfig()
    st = out.truncation
    gt_rgb = np.asarray(gt_rgb, dtype=np.float64).reshape(-1, 3)
    gt_t = np.asarray(gt_t, dtype=np.float64).reshape(-1)
    sup = out.hit & (gt_t > 0)
    n_sup = int(sup.sum())
    if n_sup == 0:
        return LossBreakdown(), None

    dc = (out.rgb - gt_rgb) * sup[:, None]
    dd = (out.depth - gt_t) * sup
    color = np.abs(dc).sum() / n_sup
    depth = np.abs(dd).sum() / n_sup
    g_rgb = weights.color * _l1_grad(dc) / n_sup
    g_depth = weights.depth * _l1_grad(dd) / n_sup

    r, t, s = out.ray, out.t, out.pe.sdf
    gap = gt_t[r] - t
    band = sup[r] & (np.abs(gap) < st)
    n_band = np.bincount(r[band], minlength=out.n_rays)
    target = np.clip(gap / st, -1.0, 1.0)
    resid = np.where(band, s - target, 0.0)
    inv_band = np.where(band, 1.0 / np.maximum(n_band[r], 1), 0.0)
    sdf = float((resid**2 * inv_band).sum() / n_sup)
    g_s = weights.sdf * 2.0 * resid * inv_band / n_sup

    fs = 0.0
    if weights.free_space > 0:
        front = sup[r] & (gap >= st)
        n_front = np.bincount(r[front], minlength=out.n_rays)
        inv_front = np.where(front, 1.0 / np.maximum(n_front[r], 1), 0.0)
        fres = np.where(front, s - 1.0, 0.0)
        fs = float((fres**2 * inv_front).sum() / n_sup)
        g_s = g_s + weights.free_space * 2.0 * fres * inv_front / n_sup

    total = (weights.color * color + weights.depth * depth + weights.sdf * sdf
             + weights.free_space * fs)
    return (LossBreakdown(float(color), float(depth), sdf, fs, float(total), n_sup),
            LossGrads(g_depth, g_rgb, g_s))


class Adam:
    """Adam over named arrays; rows appended later get their own step count."""

    def __init__(self, lr: dict, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = dict(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict = {}
        self.v: dict = {}
        self.steps: dict = {}

    def _state(self, name, p):
        m = self.m.get(name)
        if m is None or m.shape[1:] != p.shape[1:] or p.ndim == 0:
            self.m[name] = np.zeros_like(p)
            self.v[name] = np.zeros_like(p)
            self.steps[name] = np.zeros(p.shape[:1] if p.ndim else (1,))
        elif len(m) < len(p):
            pad = len(p) - len(m)
            self.m[name] = np.concatenate([m, np.zeros((pad,) + p.shape[1:])])
            self.v[name] = np.concatenate([self.v[name], np.zeros((pad,) + p.shape[1:])])
            self.steps[name] = np.concatenate([self.steps[name], np.zeros(pad)])
        return self.m[name], self.v[name], self.steps[name]

    def delta(self, name: str, p: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Update moments with gradient ``g`` and return the step to add."""
        m, v, k = self._state(name, p)
        m *= self.b1
        m += (1 - self.b1) * g
        v *= self.b2
        v += (1 - self.b2) * g * g
        k += 1
        shape = (-1,) + (1,) * (p.ndim - 1) if p.ndim else (1,)
        c1 = (1 - self.b1 ** k).reshape(shape)
        c2 = (1 - self.b2 ** k).reshape(shape)
        step = -self.lr[name] * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return step.reshape(p.shape)

    def step(self, name: str, p: np.ndarray, g: np.ndarray):
        """In-place update of ``p``."""
        if self.lr[name] == 0:
            return
        p += self.delta(name, p, g)


@dataclass
class Keyframe:
    frame_id: int
    frame: Frame
    pose: Pose


@dataclass
class TrackResult:
    pose: Pose
    lost: bool
    losses: list


def valid_pixels(frame: Frame) -> np.ndarray:
    return np.flatnonzero(frame.depth.ravel() > 0)


def frame_rays(frame: Frame, cam: Camera, pose: Pose, flat_idx: np.ndarray):
    """Rays and supervision for flat pixel indices of a frame."""
    v, u = np.divmod(flat_idx, cam.width)
    o, d, scale = pixel_rays(u, v, cam, pose)
    gt_t = frame.depth.ravel()[flat_idx] * scale
    gt_rgb = frame.rgb.reshape(-1, 3)[flat_idx]
    return o, d, gt_t, gt_rgb


def track_frame(frame: Frame, prev_pose: Pose, params: FieldParams, cam: Camera,
                cfg: SlamConfig, rng: np.random.Generator) -> TrackResult:
    """Refine the pose of ``frame`` against a frozen field, from ``prev_pose``."""
    pose = prev_pose
    pix = valid_pixels(frame)
    opt = Adam({"pose": cfg.lr_pose})
    twist = np.zeros(6)
    losses = []
    any_hit = False
    if len(pix) == 0:
        return TrackResult(prev_pose, True, losses)
    n_it = cfg.tracking_iterations
    for it in range(n_it):
        # linear decay from lr_pose to lr_pose * lr_pose_final
        frac = it / (n_it - 1) if n_it > 1 else 0.0
        opt.lr["pose"] = cfg.lr_pose * (1.0 - (1.0 - cfg.lr_pose_final) * frac)
        idx = rng.choice(pix, size=min(cfg.track_rays, len(pix)), replace=False)
        o, d, gt_t, gt_rgb = frame_rays(frame, cam, pose, idx)
        out = render_rays(params, o, d, cfg.render)
        loss, grads = compute_loss(out, gt_rgb, gt_t, cfg.loss)
        if grads is None:
            continue
        any_hit = True
        losses.append(loss)
        _, g_pose = render_backward(params, out, grads.depth, grads.rgb, grads.sdf,
                                    need_pose=True, need_params=False)
        pose = se3_exp(opt.delta("pose", twist, g_pose)) @ pose
    if not any_hit:
        log.warning("tracking lost: no ray of any batch hit the field")
        return TrackResult(prev_pose, True, losses)
    return TrackResult(pose, False, losses)


class Slam:
    """Incremental voxel-field SLAM state."""

    def __init__(self, cam: Camera, cfg: Optional[SlamConfig] = None):
        self.cam = cam
        self.cfg = cfg = cfg or SlamConfig()
        self.rng = np.random.default_rng(cfg.seed)
        self.bank = VertexBank(cfg.field.feature_dim, seed=cfg.seed,
                               sdf_init=cfg.field.sdf_init)
        self.store = VoxelStore(cfg.field.sparse_edge, bank=self.bank)
        self.decoder = Decoder(cfg.field.feature_dim, cfg.field.hidden_dim, seed=cfg.seed)
        self.optim = Adam({"sdf": cfg.lr_sdf, "feat": cfg.lr_feat,
                           **{k: cfg.lr_decoder for k in Decoder.names}})
        self.keyframes: list[Keyframe] = []
        self.trajectory: list[Pose] = []
        self.timestamps: list[float] = []
        self.history: list[dict] = []
        self.map_steps = 0
        self.map_losses: list[float] = []  # total loss of every mapping step
        self._current: Optional[Keyframe] = None

    # -- field access -------------------------------------------------------

    def params(self) -> FieldParams:
        return FieldParams(self.store.view(), self.bank.sdf_raw, self.bank.color_feat,
                           self.decoder, self.cfg.field.activation)

    def snapshot(self) -> FieldParams:
        return self.params().snapshot()

    # -- stages -------------------------------------------------------------

    def expand(self, frame: Frame, pose: Pose) -> AllocationStats:
        e = self.cfg.edge
        mask = canny(to_gray(frame.rgb), e.canny_low, e.canny_high)
        pts, is_edge = label_cloud(frame.depth, mask, self.cam, pose, e.point_stride)
        return self.store.insert_points(pts, is_edge)

    def map_step(self) -> LossBreakdown:
        """One optimisation step of vertices and decoder on a mixed ray batch."""
        cfg = self.cfg
        cur = self._current
        if cur is None:
            n_kf = cfg.map_rays if self.keyframes else 0
            groups = []
        else:
            n_kf = int(round(cfg.map_rays * cfg.keyframe_share)) if self.keyframes else 0
            groups = [(cur, cfg.map_rays - n_kf)]
        if n_kf:
            pick = self.rng.integers(0, len(self.keyframes), size=n_kf)
            counts = np.bincount(pick, minlength=len(self.keyframes))
            groups += [(kf, int(c)) for kf, c in zip(self.keyframes, counts) if c]
        os_, ds_, ts_, cs_ = [], [], [], []
        for kf, n in groups:
            pix = valid_pixels(kf.frame)
            if n == 0 or len(pix) == 0:
                continue
            idx = self.rng.choice(pix, size=n, replace=n > len(pix))
            o, d, gt_t, gt_rgb = frame_rays(kf.frame, self.cam, kf.pose, idx)
            os_.append(o), ds_.append(d), ts_.append(gt_t), cs_.append(gt_rgb)
        params = self.params()
        if not os_:
            return LossBreakdown()
        out = render_rays(params, np.concatenate(os_), np.concatenate(ds_), cfg.render)
        loss, grads = compute_loss(out, np.concatenate(cs_), np.concatenate(ts_), cfg.loss)
        self.map_steps += 1
        self.map_losses.append(loss.total)
        if grads is None:
            log.warning("mapping step skipped: no supervised ray hit the field")
            return loss
        g, _ = render_backward(params, out, grads.depth, grads.rgb, grads.sdf)
        self.optim.step("sdf", self.bank.sdf_raw, g.sdf_raw)
        self.optim.step("feat", self.bank.color_feat, g.color_feat)
        for k, p in self.decoder.params.items():
            self.optim.step(k, p, g.decoder[k])
        return loss

    def refine(self, steps: int) -> list:
        """Extra mapping steps after the last frame, all rays from keyframes."""
        if steps and not self.keyframes:
            raise ValueError("refine needs at least one keyframe")
        self._current = None
        return [self.map_step() for _ in range(steps)]

    def process_frame(self, frame: Frame, gt_pose: Optional[Pose] = None,
                      oracle: bool = False) -> dict:
        """Track (unless oracle/first frame), expand, maybe keyframe, then map."""
        cfg = self.cfg
        k = len(self.trajectory)
        lost = False
        track_losses = []
        if k == 0:
            pose = gt_pose if (gt_pose is not None and cfg.use_gt_first_pose) else Pose.identity()
        elif oracle:
            if gt_pose is None:
                raise ValueError("oracle mode needs ground-truth poses")
            pose = gt_pose
        else:
            res = track_frame(frame, self.trajectory[-1], self.snapshot(), self.cam,
                              cfg, self.rng)
            pose, lost, track_losses = res.pose, res.lost, res.losses
        stats = self.expand(frame, pose)
        self._current = Keyframe(k, frame, pose)
        if k % cfg.keyframe_interval == 0:
            self.keyframes.append(self._current)
        iters = cfg.warmup_iterations if k == 0 else cfg.mapping_iterations
        loss = LossBreakdown()
        for _ in range(iters):
            loss = self.map_step()
        self.trajectory.append(pose)
        self.timestamps.append(frame.timestamp)
        rec = {"frame": k, "timestamp": frame.timestamp, "lost": lost,
               "new_dense": stats.new_dense, "new_sparse": stats.new_sparse,
               "discarded": stats.discarded, "voxels": len(self.store),
               "vertices": len(self.bank),
               "track_total": track_losses[-1].total if track_losses else float("nan"),
               "color_l1": loss.color_l1, "depth_l1": loss.depth_l1,
               "sdf_term": loss.sdf_term, "total": loss.total, "rays": loss.ray_count}
        self.history.append(rec)
        return rec
