"""Image edges as a prior for where dense voxels are allocated."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .geometry import Camera, Pose, backproject_depth

CANNY_LOW = 30.0
CANNY_HIGH = 60.0
POINT_STRIDE = 4

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def to_gray(rgb: np.ndarray) -> np.ndarray:
    """BT.601 luma on a 0..255 scale; accepts float [0, 1] or uint8 input."""
    rgb = np.asarray(rgb)
    scale = 1.0 if rgb.dtype == np.uint8 else 255.0
    rgb = rgb.astype(np.float64) * scale
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


def gaussian_kernel(size: int = 5, sigma: float = 1.4) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
    return g / g.sum()


def canny(gray, low: float = CANNY_LOW, high: float = CANNY_HIGH) -> np.ndarray:
    """Classic Canny on a luminance image in [0, 255] -> boolean edge mask.

    A 2-pixel border is never marked.
    """
    if not 0 < low < high:
        raise ValueError(f"need 0 < low < high, got {low}:{high}")
    img = np.asarray(gray, dtype=np.float64)
    smooth = ndimage.convolve(img, gaussian_kernel(), mode="nearest")
    gx = ndimage.correlate(smooth, _SOBEL_X, mode="nearest")
    gy = ndimage.correlate(smooth, _SOBEL_X.T, mode="nearest")
    mag = np.hypot(gx, gy)

    # quantise direction into 0, 45, 90, 135 degrees
    ang = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    q = (np.floor((ang + 22.5) / 45.0).astype(int)) % 4
    offsets = [(0, 1), (1, 1), (1, 0), (1, -1)]  # (drow, dcol) along gradient
    h, w = img.shape
    pad = np.pad(mag, 1)
    keep = np.zeros_like(mag, dtype=bool)
    for b, (dr, dc) in enumerate(offsets):
        fwd = pad[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
        bwd = pad[1 - dr:1 - dr + h, 1 - dc:1 - dc + w]
        # strict on one side so flat-topped ridges stay one pixel wide
        keep |= (q == b) & (mag > bwd) & (mag >= fwd)
    nms = np.where(keep, mag, 0.0)
    nms[:2, :] = nms[-2:, :] = 0.0
    nms[:, :2] = nms[:, -2:] = 0.0

    candidate = nms >= low
    labels, n = ndimage.label(candidate, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros_like(candidate)
    strong_labels = np.unique(labels[nms >= high])
    strong_labels = strong_labels[strong_labels > 0]
    return np.isin(labels, strong_labels)


def label_cloud(depth: np.ndarray, mask: np.ndarray, cam: Camera, pose: Pose,
                stride: int = POINT_STRIDE):
    """Back-project every ``stride``-th valid pixel with its edge flag.

    Returns ``(points (n, 3), is_edge (n,))``.
    """
    if mask.shape != depth.shape:
        raise ValueError("edge mask and depth image sizes differ")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    pts, rows, cols = backproject_depth(depth, cam, pose, stride)
    return pts, mask[rows, cols]
