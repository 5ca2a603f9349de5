"""Rigid poses, pinhole cameras and ray construction.

Poses map camera coordinates to world coordinates (camera-to-world).
Cameras follow the OpenCV convention: x right, y down, z forward.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

_SMALL_ANGLE = 1e-8
_PI_GUARD = 1e-9


class BranchAmbiguityError(ValueError):
    """The rotation angle is too close to pi for a unique logarithm."""


def skew(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return (np.abs(r.T @ r - np.eye(3)).max() < tol
                and abs(np.linalg.det(r) - 1.0) < tol)


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    k = skew(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * k @ k
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * k @ k


def _left_jacobian(w) -> np.ndarray:
    theta = np.linalg.norm(w)
    k = skew(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + k @ k / 6.0
    b = (1.0 - np.cos(theta)) / theta**2
    c = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + b * k + c * k @ k


def _left_jacobian_inv(w) -> np.ndarray:
    theta = np.linalg.norm(w)
    k = skew(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + k @ k / 12.0
    half = 0.5 * theta
    d = (1.0 - half / np.tan(half)) / theta**2
    return np.eye(3) - 0.5 * k + d * k @ k


def se3_exp(twist) -> Pose:
    """Exponential map of a twist ``[omega; v]`` (radians, meters)."""
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    w, v = twist[:3], twist[3:]
    return Pose(so3_exp(w), _left_jacobian(w) @ v)


def so3_log(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    cos_t = np.clip(0.5 * (np.trace(r) - 1.0), -1.0, 1.0)
    theta = float(np.arccos(cos_t))
    vee = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if np.pi - theta < _PI_GUARD:
        raise BranchAmbiguityError(
            f"rotation angle {theta!r} is within {_PI_GUARD} of pi")
    if theta < _SMALL_ANGLE:
        return 0.5 * vee
    if theta < np.pi - 1e-3:
        return theta / (2.0 * np.sin(theta)) * vee
    # near pi: recover the axis from the symmetric part
    aat = (0.5 * (r + r.T) - cos_t * np.eye(3)) / (1.0 - cos_t)
    i = int(np.argmax(np.diag(aat)))
    axis = aat[:, i] / np.sqrt(aat[i, i])
    if axis @ vee < 0:
        axis = -axis
    return theta * axis


def se3_log(pose: Pose) -> np.ndarray:
    w = so3_log(pose.rotation)
    v = _left_jacobian_inv(w) @ pose.translation
    return np.concatenate([w, v])


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")
        if not self.depth_scale > 0:
            raise ValueError("depth_scale must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def unproject(self, u, v) -> np.ndarray:
        """K^-1 [u, v, 1] for arrays of pixel coordinates -> (..., 3)."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy,
                         np.ones(np.broadcast(u, v).shape)], axis=-1)

    def contains(self, u, v) -> bool:
        return 0 <= u <= self.width - 1 and 0 <= v <= self.height - 1


class Ray(NamedTuple):
    origin: np.ndarray
    direction: np.ndarray


def backproject(pixel, depth: float, cam: Camera, pose: Pose) -> np.ndarray:
    u, v = pixel
    if not depth > 0:
        raise ValueError(f"invalid depth {depth!r}")
    if not cam.contains(u, v):
        raise ValueError(f"pixel {pixel!r} outside the image")
    return pose.apply(depth * cam.unproject(u, v))


def project(points, cam: Camera, pose: Pose):
    """World points -> (u, v, z) arrays in the camera's image."""
    pc = pose.inverse().apply(points)
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[..., 0] / z + cam.cx
        v = cam.fy * pc[..., 1] / z + cam.cy
    return u, v, z


def pixel_ray(pixel, cam: Camera, pose: Pose) -> Ray:
    u, v = pixel
    if not cam.contains(u, v):
        raise ValueError(f"pixel {pixel!r} outside the image")
    d = pose.rotation @ cam.unproject(u, v)
    return Ray(pose.translation.copy(), d / np.linalg.norm(d))


def pixel_rays(u, v, cam: Camera, pose: Pose):
    """Batched rays for pixel arrays.

    Returns ``(origins, directions, scale)`` where ``scale`` is
    ``|K^-1 [u, v, 1]|``: a z-depth ``z`` sits at ray distance ``z * scale``.
    """
    k = cam.unproject(u, v).reshape(-1, 3)
    scale = np.linalg.norm(k, axis=1)
    dirs = (k / scale[:, None]) @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return origins, dirs, scale


def backproject_depth(depth: np.ndarray, cam: Camera, pose: Pose,
                      stride: int = 1):
    """Back-project every ``stride``-th valid pixel of a metric depth image.

    Returns ``(points, rows, cols)``; pixels with depth <= 0 are skipped.
    """
    rows, cols = np.mgrid[0:depth.shape[0]:stride, 0:depth.shape[1]:stride]
    rows, cols = rows.ravel(), cols.ravel()
    z = depth[rows, cols]
    ok = z > 0
    rows, cols, z = rows[ok], cols[ok], z[ok]
    pts = pose.apply(cam.unproject(cols, rows) * z[:, None])
    return pts, rows, cols
