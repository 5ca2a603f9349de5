"""Analytic SDF scenes, a sphere-tracing RGB-D renderer and orbit trajectories.

These provide exact ground truth for tests and desk-scale experiments.
Scenes are positive outside solid matter (in free space).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .geometry import Camera, Pose, pixel_rays

CHECKER = 0.4
LIGHT_DIR = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
AMBIENT = 0.5


def sphere_sdf(center, radius):
    c = np.asarray(center, dtype=np.float64)

    def f(p):
        return np.linalg.norm(np.asarray(p) - c, axis=-1) - radius
    return f


def box_sdf(center, half):
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(half, dtype=np.float64)

    def f(p):
        q = np.abs(np.asarray(p) - c) - h
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside
    return f


def checker_albedo(colors=((0.85, 0.55, 0.35), (0.35, 0.55, 0.8)), period=CHECKER):
    """Axis-aligned 3D checkerboard of cell size ``period``."""
    a, b = np.asarray(colors[0]), np.asarray(colors[1])

    def f(p):
        k = np.floor(np.asarray(p) / period).astype(np.int64).sum(axis=-1)
        return np.where((k % 2 == 0)[..., None], a, b)
    return f


@dataclass
class AnalyticScene:
    sdf: Callable
    albedo: Callable
    name: str = "scene"
    surfaces: list = field(default_factory=list)

    def normal(self, p, h: float = 1e-5) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        g = np.stack([self.sdf(p + h * e) - self.sdf(p - h * e) for e in np.eye(3)], -1)
        return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)

    def sample_surface(self, n: int, rng) -> np.ndarray:
        """Area-uniform surface samples (primitives registered in ``surfaces``)."""
        areas = np.array([s[0] for s in self.surfaces])
        counts = rng.multinomial(n, areas / areas.sum())
        pts = [s[1](k, rng) for s, k in zip(self.surfaces, counts) if k]
        return np.concatenate(pts) if pts else np.zeros((0, 3))


def _sphere_sampler(center, radius):
    def f(n, rng):
        v = rng.normal(size=(n, 3))
        return np.asarray(center) + radius * v / np.linalg.norm(v, axis=1, keepdims=True)
    return 4 * np.pi * radius**2, f


def _box_sampler(center, half, exclude: Optional[Callable] = None):
    c, h = np.asarray(center, float), np.asarray(half, float)
    faces = []
    for ax in range(3):
        u, v = [a for a in range(3) if a != ax]
        for sgn in (-1.0, 1.0):
            faces.append((4 * h[u] * h[v], ax, u, v, sgn))
    areas = np.array([f[0] for f in faces])

    def f(n, rng):
        which = rng.choice(len(faces), size=n, p=areas / areas.sum())
        pts = np.empty((n, 3))
        for i, (_, ax, u, v, sgn) in enumerate(faces):
            m = which == i
            k = int(m.sum())
            pts[m, ax] = c[ax] + sgn * h[ax]
            pts[m, u] = c[u] + rng.uniform(-h[u], h[u], k)
            pts[m, v] = c[v] + rng.uniform(-h[v], h[v], k)
        return pts
    return areas.sum(), f


def sphere_scene(radius: float = 0.5, center=(0.0, 0.0, 0.0)) -> AnalyticScene:
    return AnalyticScene(sphere_sdf(center, radius), checker_albedo(), "sphere",
                         [_sphere_sampler(center, radius)])


def room_scene() -> AnalyticScene:
    """Box interior [0, 2]^3 with a sphere and a box standing inside."""
    room = box_sdf((1.0, 1.0, 1.0), (1.0, 1.0, 1.0))
    ball = sphere_sdf((1.25, 0.9, 0.3), 0.3)
    block = box_sdf((0.7, 1.2, 0.25), (0.2, 0.15, 0.25))

    def sdf(p):
        return np.minimum(np.minimum(-room(p), ball(p)), block(p))

    room_area, room_pts = _box_sampler((1.0, 1.0, 1.0), (1.0, 1.0, 1.0))
    return AnalyticScene(sdf, checker_albedo(), "room", [
        (room_area, room_pts),
        _sphere_sampler((1.25, 0.9, 0.3), 0.3),
        _box_sampler((0.7, 1.2, 0.25), (0.2, 0.15, 0.25)),
    ])


SCENES = {"sphere": sphere_scene, "room": room_scene}


def sphere_trace(scene: AnalyticScene, origins, dirs, t_max: float = 10.0,
                 eps: float = 1e-6, max_iter: int = 8192):
    """Vectorised sphere tracing -> ray distances (nan on miss)."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    t = np.zeros(len(origins))
    done = np.zeros(len(origins), bool)
    act = np.arange(len(origins))
    for _ in range(max_iter):
        if act.size == 0:
            break
        d = scene.sdf(origins[act] + t[act, None] * dirs[act])
        conv = d < eps
        done[act[conv]] = True
        t[act] += np.where(conv, 0.0, d)
        act = act[~conv & (t[act] <= t_max)]
    t[~done | (t > t_max)] = np.nan
    return t


@dataclass
class Frame:
    rgb: np.ndarray     # (H, W, 3) float in [0, 1]
    depth: np.ndarray   # (H, W) metric z-depth, 0 = invalid
    index: int = 0
    timestamp: float = 0.0


def render_frame(scene: AnalyticScene, pose: Pose, cam: Camera,
                 depth_noise: float = 0.0, rng=None) -> Frame:
    v, u = np.mgrid[0:cam.height, 0:cam.width]
    o, d, scale = pixel_rays(u.ravel(), v.ravel(), cam, pose)
    t = sphere_trace(scene, o, d)
    hit = ~np.isnan(t)
    z = np.zeros(len(t))
    z[hit] = t[hit] / scale[hit]
    rgb = np.zeros((len(t), 3))
    if hit.any():
        p = o[hit] + t[hit, None] * d[hit]
        shade = AMBIENT + (1.0 - AMBIENT) * np.clip(scene.normal(p) @ LIGHT_DIR, 0.0, 1.0)
        rgb[hit] = np.clip(scene.albedo(p) * shade[:, None], 0.0, 1.0)
    if depth_noise > 0:
        rng = rng or np.random.default_rng(0)
        z[hit] += rng.normal(0.0, depth_noise, int(hit.sum()))
        z[z < 0] = 0.0
    return Frame(rgb.reshape(cam.height, cam.width, 3), z.reshape(cam.height, cam.width))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    n = np.linalg.norm(right)
    if n < 1e-12:
        raise ValueError("viewing direction is parallel to up")
    right /= n
    down = np.cross(fwd, right)
    return Pose(np.stack([right, down, fwd], axis=1), eye)


def orbit_trajectory(center, radius: float, n_frames: int, height: float = 0.0,
                     arc: float = 2 * np.pi, start: float = 0.0) -> list:
    """Poses on a horizontal ring around ``center``, each looking at it.

    Azimuths are ``start + k * arc / n_frames``; the default spans the full
    circle.
    """
    if n_frames < 1 or not radius > 0:
        raise ValueError("need n_frames >= 1 and radius > 0")
    c = np.asarray(center, dtype=np.float64)
    poses = []
    for k in range(n_frames):
        a = start + arc * k / n_frames
        eye = c + np.array([radius * np.cos(a), radius * np.sin(a), height])
        poses.append(look_at(eye, c))
    return poses


def default_camera(width: int = 160, height: int = 120, depth_scale: float = 1.0 / 5000):
    f = 0.75 * width
    return Camera(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height, depth_scale)


# orbit presets used by the CLI and the acceptance runs
PRESETS = {
    "sphere": dict(center=(0.0, 0.0, 0.0), radius=1.6, height=0.6, arc=2 * np.pi),
    "room": dict(center=(1.0, 1.0, 0.45), radius=0.55, height=0.65, arc=np.deg2rad(60.0)),
}
