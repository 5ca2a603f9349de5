"""Trajectory, image and mesh metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import correlate
from scipy.spatial import cKDTree

from .geometry import Pose, project
from .mesh import TriMesh

PSNR_CAP = 100.0
COMPLETION_RADIUS = 0.05


@dataclass
class AteReport:
    rmse: float
    mean: float
    median: float
    errors: np.ndarray = field(repr=False)
    aligned: bool = True

    def as_dict(self):
        return {"rmse": self.rmse, "mean": self.mean, "median": self.median,
                "aligned": self.aligned, "frames": int(len(self.errors))}


def _positions(traj) -> np.ndarray:
    if len(traj) and isinstance(traj[0], Pose):
        return np.array([p.translation for p in traj], dtype=np.float64)
    return np.asarray(traj, dtype=np.float64).reshape(-1, 3)


def rigid_align(src: np.ndarray, dst: np.ndarray):
    """Rotation R and translation t minimising sum |R src + t - dst|^2."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    h = (src - mu_s).T @ (dst - mu_d)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, mu_d - r @ mu_s


def ate(est, gt, align: bool = True) -> AteReport:
    """Absolute trajectory error over camera positions (poses or (n, 3) arrays)."""
    p, q = _positions(est), _positions(gt)
    if len(p) != len(q):
        raise ValueError(f"trajectory lengths differ: {len(p)} vs {len(q)}")
    if len(p) == 0:
        raise ValueError("empty trajectory")
    if align and len(p) > 1:
        r, t = rigid_align(p, q)
        p = p @ r.T + t
    err = np.linalg.norm(p - q, axis=1)
    return AteReport(float(np.sqrt(np.mean(err**2))), float(err.mean()),
                     float(np.median(err)), err, align)


def _check_pair(img, ref):
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError(f"image shapes differ: {img.shape} vs {ref.shape}")
    return img, ref


def psnr(img, ref, mask=None) -> float:
    """PSNR for images in [0, 1]; ``mask`` restricts the pixels compared."""
    img, ref = _check_pair(img, ref)
    diff = (img - ref) ** 2
    if mask is not None:
        diff = diff[np.asarray(mask, dtype=bool)]
    mse = float(diff.mean())
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-ax**2 / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(img, ref, size: int = 11, sigma: float = 1.5, k1: float = 0.01,
         k2: float = 0.03) -> float:
    """Single-scale SSIM, Gaussian window, over the fully-covered ('valid') region.

    Colour images are scored per channel and averaged.
    """
    img, ref = _check_pair(img, ref)
    if img.ndim == 3:
        return float(np.mean([ssim(img[..., c], ref[..., c], size, sigma, k1, k2)
                              for c in range(img.shape[2])]))
    if min(img.shape) < size:
        raise ValueError("image smaller than the SSIM window")
    w = gaussian_window(size, sigma)
    c1, c2 = k1**2, k2**2

    def filt(a):
        return correlate(a, w, mode="valid", method="direct")

    mx, my = filt(img), filt(ref)
    sxx = filt(img * img) - mx**2
    syy = filt(ref * ref) - my**2
    sxy = filt(img * ref) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx**2 + my**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def depth_l1(depth, ref, mask=None) -> float:
    """Mean |depth - ref| over pixels with valid reference depth (and ``mask``)."""
    depth, ref = _check_pair(depth, ref)
    m = ref > 0
    if mask is not None:
        m &= np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("no valid pixels to compare")
    return float(np.abs(depth[m] - ref[m]).mean())


@dataclass
class MeshReport:
    accuracy: float          # cm
    completion: float        # cm
    completion_ratio: float  # percent of gt samples within 5 cm
    valid: bool = True

    def as_dict(self):
        return {"accuracy_cm": self.accuracy, "completion_cm": self.completion,
                "completion_ratio": self.completion_ratio, "valid": self.valid}


def nearest_distance(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(ref).query(query)
    return d


def _surface_points(src, n: int, rng) -> np.ndarray:
    if isinstance(src, TriMesh):
        return src.sample_points(n, rng)
    if hasattr(src, "sample_surface"):
        return src.sample_surface(n, rng)
    return np.asarray(src, dtype=np.float64).reshape(-1, 3)


def mesh_metrics(recon: TriMesh, gt, n_points: int = 100_000, rng=None,
                 gt_filter=None) -> MeshReport:
    """Chamfer-style accuracy / completion between a mesh and ground truth.

    ``gt`` is a :class:`TriMesh`, a scene with ``sample_surface`` or a point
    array.  ``gt_filter`` (points -> bool mask) restricts the ground-truth
    samples used for completion, e.g. to the region the cameras actually
    observed.  Accuracy always measures against the whole surface.
    """
    if n_points < 1000:
        raise ValueError("need at least 1000 sample points")
    rng = rng if rng is not None else np.random.default_rng(0)
    if recon is None or len(recon) == 0 or recon.face_areas().sum() <= 0:
        return MeshReport(float("nan"), float("nan"), 0.0, valid=False)
    rec_pts = recon.sample_points(n_points, rng)
    gt_pts = _surface_points(gt, n_points, rng)
    target = gt_pts[gt_filter(gt_pts)] if gt_filter is not None else gt_pts
    if len(target) == 0:
        return MeshReport(float("nan"), float("nan"), 0.0, valid=False)
    acc = nearest_distance(rec_pts, gt_pts)
    comp = nearest_distance(target, rec_pts)
    return MeshReport(100.0 * float(acc.mean()), 100.0 * float(comp.mean()),
                      100.0 * float((comp < COMPLETION_RADIUS).mean()))


def observed_mask(points: np.ndarray, cam, poses: Sequence[Pose], depths: Sequence[np.ndarray],
                  tol: float = 0.02) -> np.ndarray:
    """Points seen by at least one depth frame (projected depth agrees within ``tol``)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    seen = np.zeros(len(points), dtype=bool)
    for pose, depth in zip(poses, depths):
        u, v, z = project(points, cam, pose)
        u, v = np.where(z > 0, u, -1.0), np.where(z > 0, v, -1.0)
        ui, vi = np.round(u).astype(np.int64), np.round(v).astype(np.int64)
        ok = (z > 0) & (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)
        d = np.zeros(len(points))
        d[ok] = depth[vi[ok], ui[ok]]
        seen |= ok & (d > 0) & (np.abs(d - z) < tol)
    return seen

