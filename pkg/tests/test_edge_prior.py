import numpy as np
import pytest

from neuv.edge_prior import CANNY_HIGH, CANNY_LOW, canny, gaussian_kernel, label_cloud, to_gray
from neuv.geometry import Camera, Pose
from neuv.synth import AnalyticScene, look_at, render_frame, sphere_sdf


def step_image(col=32, size=64):
    img = np.zeros((size, size))
    img[:, col:] = 255.0
    return img


def test_defaults():
    assert (CANNY_LOW, CANNY_HIGH) == (30.0, 60.0)


def test_uniform_image_has_no_edges():
    assert not canny(np.full((40, 50), 117.0)).any()


def test_bad_thresholds():
    with pytest.raises(ValueError):
        canny(np.zeros((8, 8)), 60, 30)
    with pytest.raises(ValueError):
        canny(np.zeros((8, 8)), 0, 30)


def test_step_edge_is_one_column():
    m = canny(step_image(), 30, 60)
    inner = m[2:-2, 2:-2]
    cols = np.flatnonzero(inner.any(axis=0)) + 2
    assert len(cols) == 1 and cols[0] in (31, 32)
    assert inner[:, cols[0] - 2].all()


@pytest.mark.parametrize("shift", [-9, -3, 1, 5, 12])
def test_step_edge_translation_equivariant(shift):
    base = canny(step_image(32), 30, 60)
    moved = canny(step_image(32 + shift), 30, 60)
    assert np.array_equal(np.roll(base, shift, axis=1)[:, 16:48], moved[:, 16:48])


def test_raising_low_never_adds_edges(rng):
    img = rng.uniform(0, 255, (48, 48))
    img = np.cumsum(img, axis=1) / 10.0 % 255.0
    prev = None
    for low in (5, 10, 20, 40, 59):
        m = canny(img, low, 60)
        if prev is not None:
            assert not (m & ~prev).any()
        prev = m


def test_gaussian_kernel_normalised():
    k = gaussian_kernel()
    assert k.shape == (5, 5) and abs(k.sum() - 1) < 1e-15
    assert np.allclose(k, k.T) and k[2, 2] == k.max()


def test_gray_weights():
    assert np.isclose(to_gray(np.array([[[1.0, 0, 0]]]))[0, 0], 0.299 * 255)
    assert np.isclose(to_gray(np.array([[[0, 255, 0]]], np.uint8))[0, 0], 0.587 * 255)


def test_label_cloud_trivial_cases():
    cam = Camera(20.0, 20.0, 9.5, 7.5, 20, 16)
    depth = np.zeros((16, 20))
    pts, edge = label_cloud(depth, np.zeros_like(depth, bool), cam, Pose.identity(), 1)
    assert len(pts) == 0 and len(edge) == 0
    depth[:] = 1.0
    pts, edge = label_cloud(depth, np.zeros_like(depth, bool), cam, Pose.identity(), 1)
    assert len(pts) == 320 and not edge.any()
    for stride in (1, 2, 3, 7):
        pts, _ = label_cloud(depth, np.zeros_like(depth, bool), cam, Pose.identity(), stride)
        assert len(pts) <= int(np.ceil(20 / stride) * np.ceil(16 / stride))
    with pytest.raises(ValueError):
        label_cloud(depth, np.zeros((3, 3), bool), cam, Pose.identity(), 1)
    with pytest.raises(ValueError):
        label_cloud(depth, np.zeros_like(depth, bool), cam, Pose.identity(), 0)


def silhouette_distance(p, centre, radius, eye):
    """Distance from sphere points to the silhouette circle seen from ``eye``."""
    axis = eye - centre
    dist = np.linalg.norm(axis)
    axis /= dist
    # tangent circle: offset r^2/dist along the axis, radius r*sqrt(1 - r^2/dist^2)
    c0 = centre + axis * radius**2 / dist
    rc = radius * np.sqrt(1 - radius**2 / dist**2)
    q = p - c0
    along = q @ axis
    radial = np.linalg.norm(q - along[:, None] * axis, axis=1)
    return np.hypot(along, radial - rc)


def test_edge_points_sit_on_the_silhouette():
    centre, radius = np.zeros(3), 0.5
    scene = AnalyticScene(sphere_sdf(centre, radius), lambda p: np.full(p.shape, 0.7))
    cam = Camera(120.0, 120.0, 79.5, 59.5, 160, 120)
    eye = np.array([1.6, -0.4, 0.6])
    pose = look_at(eye, centre)
    fr = render_frame(scene, pose, cam)
    mask = canny(to_gray(fr.rgb))
    pts, edge = label_cloud(fr.depth, mask, cam, pose, stride=1)
    assert edge.sum() > 50
    d = silhouette_distance(pts[edge], centre, radius, eye)
    assert np.mean(d < 2 * 0.1) > 0.9
    # non-edge points are mostly far from it
    assert np.median(silhouette_distance(pts[~edge], centre, radius, eye)) > 0.2
