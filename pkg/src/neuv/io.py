"""Datasets, configuration files, trajectories, PLY meshes, PNGs and checkpoints.

Dataset directory layout::

    intrinsics.txt      fx fy cx cy width height depth_scale
    color/000000.png    8-bit RGB
    depth/000000.png    16-bit, raw * depth_scale = metres, 0 = no reading
    groundtruth.txt     optional, one TUM line per frame

Checkpoint layout (all little-endian; ``u64`` counts, ``f64`` scalars,
``f32`` arrays)::

    8 bytes   magic b"NEUVCKPT"
    u64       format version (1)
    f64       sparse voxel edge length (dense edge is half of it)
    u64       activation flag (0 = tanh, 1 = identity)
    u64       feature_dim A, u64 hidden_dim H
    u64       vertex count N
    f32[N]    raw SDF per vertex
    f32[N*A]  colour features, row-major
    u64       voxel count M, then per voxel in allocation order:
              i64 level, i64 ix, iy, iz, i64 vertex_ids[8]
    f32[...]  decoder w1 (A*H), b1 (H), w2 (H*H), b2 (H), w3 (H*3), b3 (3)
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .field import Decoder, VertexBank
from .geometry import Camera, Pose
from .hashmv import Level, VoxelStore
from .mesh import TriMesh
from .slam import SlamConfig
from .synth import Frame


class LoadError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


def fmt(x: float) -> str:
    """Shortest round-tripping positional form without trailing zeros."""
    return np.format_float_positional(float(x) + 0.0, unique=True, trim="-")


# ---------------------------------------------------------------------------
# config


def _sections(cfg: SlamConfig):
    yield "slam", cfg
    for name in ("field", "edge", "loss", "render"):
        yield name, getattr(cfg, name)


def config_items(cfg: SlamConfig) -> list:
    items = []
    for section, obj in _sections(cfg):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if dataclasses.is_dataclass(value):
                continue
            items.append((f"{section}.{f.name}", value))
    return items


def dump_config(cfg: SlamConfig) -> str:
    lines = []
    for key, value in config_items(cfg):
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = fmt(value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def _coerce(key: str, text: str, like):
    try:
        if isinstance(like, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc


def parse_config(text: str, base: Optional[SlamConfig] = None) -> SlamConfig:
    """Parse ``section.key = value`` lines over defaults; unknown keys are rejected."""
    cfg = dataclasses.replace(base) if base else SlamConfig()
    cfg.field = dataclasses.replace(cfg.field)
    cfg.edge = dataclasses.replace(cfg.edge)
    cfg.loss = dataclasses.replace(cfg.loss)
    cfg.render = dataclasses.replace(cfg.render)
    targets = dict(_sections(cfg))
    known = dict(config_items(cfg))
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        section, name = key.split(".", 1)
        setattr(targets[section], name, _coerce(key, value, known[key]))
    try:
        # re-run validation on the edited objects
        SlamConfig.__post_init__(cfg)
        if cfg.field.activation not in ("tanh", "identity"):
            raise ValueError(f"unknown activation {cfg.field.activation!r}")
        _check_render(cfg.render)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _check_render(rc):
    if not (rc.step > 0 and rc.truncation > 0 and rc.t_min < rc.t_max
            and rc.max_samples_per_ray >= 1):
        raise ValueError("render: need step > 0, truncation > 0, t_min < t_max")


def load_config(path) -> SlamConfig:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# trajectories


QUAT_DECIMALS = 12


def _quat(rotation) -> np.ndarray:
    q = Rotation.from_matrix(rotation).as_quat()  # x, y, z, w
    q = np.round(-q if q[3] < 0 else q, QUAT_DECIMALS)
    return q + 0.0


def pose_to_tum(pose: Pose) -> np.ndarray:
    """``[tx, ty, tz, qx, qy, qz, qw]`` with ``qw >= 0``.

    The quaternion is rounded and then iterated until reading it back
    reproduces it, so rewriting a trajectory that was read from disk gives
    the same bytes.
    """
    q = _quat(pose.rotation)
    for _ in range(8):
        again = _quat(Rotation.from_quat(q).as_matrix())
        if np.array_equal(again, q):
            break
        q = again
    return np.concatenate([pose.translation, q])


def pose_from_tum(values) -> Pose:
    v = np.asarray(values, dtype=np.float64)
    if v.shape != (7,):
        raise ValueError("expected tx ty tz qx qy qz qw")
    q = v[3:]
    n = np.linalg.norm(q)
    if not n > 0:
        raise ValueError("zero quaternion")
    return Pose(Rotation.from_quat(q / n).as_matrix(), v[:3].copy())


def format_tum_line(timestamp: float, pose: Pose) -> str:
    return " ".join(fmt(x) for x in (timestamp, *pose_to_tum(pose)))


def write_trajectory(poses, timestamps, path):
    if len(poses) != len(timestamps):
        raise ValueError("poses and timestamps differ in length")
    text = "".join(format_tum_line(t, p) + "\n" for t, p in zip(timestamps, poses))
    Path(path).write_text(text)


def read_trajectory(path):
    """-> (timestamps array, list of Pose)."""
    ts, poses = [], []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise LoadError(f"{path}: bad trajectory line {line!r}")
        vals = [float(x) for x in parts]
        ts.append(vals[0])
        poses.append(pose_from_tum(vals[1:]))
    return np.array(ts), poses


# ---------------------------------------------------------------------------
# images


def write_png(image: np.ndarray, path):
    """Float RGB in [0, 1] -> 8-bit PNG; uint16 2-D array -> 16-bit PNG."""
    image = np.asarray(image)
    if image.ndim == 2 and image.dtype == np.uint16:
        Image.fromarray(image).save(path)
    elif image.ndim == 3 and image.shape[2] == 3:
        if image.dtype != np.uint8:
            image = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(image, "RGB").save(path)
    else:
        raise ValueError("expected (H, W, 3) colour or (H, W) uint16 depth")


def depth_to_raw(depth_m: np.ndarray, depth_scale: float) -> np.ndarray:
    raw = np.round(np.asarray(depth_m) / depth_scale)
    if raw.max(initial=0) > 65535:
        raise ValueError("depth exceeds the 16-bit range at this depth_scale")
    return np.clip(raw, 0, 65535).astype(np.uint16)


def read_color(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_depth(path, depth_scale: float) -> np.ndarray:
    with Image.open(path) as im:
        raw = np.asarray(im)
    if raw.ndim != 2:
        raise LoadError(f"{path}: depth image must be single channel")
    return raw.astype(np.float64) * depth_scale


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    root: Path
    camera: Camera
    color_paths: list
    depth_paths: list
    timestamps: np.ndarray
    gt_poses: Optional[list] = None

    def __len__(self):
        return len(self.color_paths)

    def frame(self, i: int) -> Frame:
        try:
            rgb = read_color(self.color_paths[i])
            depth = read_depth(self.depth_paths[i], self.camera.depth_scale)
        except (OSError, ValueError) as exc:
            raise LoadError(f"cannot read frame {i}: {exc}") from exc
        if rgb.shape[:2] != depth.shape or depth.shape != (self.camera.height, self.camera.width):
            raise LoadError(f"frame {i}: image size does not match intrinsics")
        return Frame(rgb, depth, i, float(self.timestamps[i]))

    def frames(self) -> Iterator[Frame]:
        for i in range(len(self)):
            yield self.frame(i)


def write_intrinsics(cam: Camera, path):
    vals = (cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height, cam.depth_scale)
    Path(path).write_text(" ".join(fmt(v) for v in vals) + "\n")


def read_intrinsics(path) -> Camera:
    try:
        vals = Path(path).read_text().split()
        fx, fy, cx, cy, w, h, ds = (float(v) for v in vals)
        return Camera(fx, fy, cx, cy, int(w), int(h), ds)
    except FileNotFoundError as exc:
        raise LoadError(f"missing {path}") from exc
    except ValueError as exc:
        raise LoadError(f"{path}: expected 'fx fy cx cy width height depth_scale' ({exc})") from exc


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise LoadError(f"{root} is not a directory")
    cam = read_intrinsics(root / "intrinsics.txt")
    colors = sorted((root / "color").glob("*.png"))
    depths = sorted((root / "depth").glob("*.png"))
    if not colors:
        raise LoadError(f"{root}: no colour frames")
    if [p.name for p in colors] != [p.name for p in depths]:
        raise LoadError(f"{root}: colour and depth frames do not pair up "
                        f"({len(colors)} vs {len(depths)})")
    gt_path = root / "groundtruth.txt"
    gt = None
    if gt_path.exists():
        ts, gt = read_trajectory(gt_path)
        if len(gt) != len(colors):
            raise LoadError(f"{gt_path}: {len(gt)} poses for {len(colors)} frames")
    else:
        ts = np.arange(len(colors), dtype=np.float64)
    if np.any(np.diff(ts) <= 0):
        raise LoadError("timestamps must be strictly increasing")
    return Dataset(root, cam, colors, depths, ts, gt)


def write_dataset(root, cam: Camera, frames, poses=None, timestamps=None):
    root = Path(root)
    (root / "color").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    write_intrinsics(cam, root / "intrinsics.txt")
    for i, fr in enumerate(frames):
        write_png(fr.rgb, root / "color" / f"{i:06d}.png")
        write_png(depth_to_raw(fr.depth, cam.depth_scale), root / "depth" / f"{i:06d}.png")
    if poses is not None:
        if timestamps is None:
            timestamps = np.arange(len(poses), dtype=np.float64)
        write_trajectory(poses, timestamps, root / "groundtruth.txt")


# ---------------------------------------------------------------------------
# PLY


def write_ply(mesh: TriMesh, path):
    v = np.ascontiguousarray(mesh.vertices, dtype="<f4")
    f = np.asarray(mesh.faces, dtype=np.int64)
    if len(f) and (f.min() < 0 or f.max() >= len(v)):
        raise ValueError("face index out of range")
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(v)}\n"
              "property float x\nproperty float y\nproperty float z\n"
              f"element face {len(f)}\n"
              "property list uchar int vertex_indices\nend_header\n")
    face_rec = np.zeros(len(f), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    face_rec["n"] = 3
    face_rec["idx"] = f
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(v.tobytes())
        fh.write(face_rec.tobytes())


def read_ply(path) -> TriMesh:
    """Reader for the binary triangle PLY files written by :func:`write_ply`."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise LoadError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise LoadError(f"{path}: only binary little-endian PLY is supported")
    counts = {}
    for line in header:
        if line.startswith("element"):
            _, name, n = line.split()
            counts[name] = int(n)
    nv, nf = counts.get("vertex", 0), counts.get("face", 0)
    off = end + len(b"end_header\n")
    v = np.frombuffer(data, dtype="<f4", count=3 * nv, offset=off).reshape(nv, 3)
    off += 12 * nv
    rec = np.frombuffer(data, dtype=[("n", "u1"), ("idx", "<i4", (3,))], count=nf, offset=off)
    if nf and np.any(rec["n"] != 3):
        raise LoadError(f"{path}: only triangle faces are supported")
    return TriMesh(v.astype(np.float64), rec["idx"].astype(np.int64))


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"NEUVCKPT"
VERSION = 1
_ACTIVATIONS = ("tanh", "identity")


@dataclass
class Checkpoint:
    store: VoxelStore
    bank: VertexBank
    decoder: Decoder
    activation: str = "tanh"


def checkpoint_bytes(store: VoxelStore, bank: VertexBank, decoder: Decoder,
                     activation: str = "tanh") -> bytes:
    a, h = decoder.in_dim, decoder.hidden
    out = [MAGIC, struct.pack("<Q", VERSION), struct.pack("<d", store.sparse_edge_len),
           struct.pack("<QQQ", _ACTIVATIONS.index(activation), a, h),
           struct.pack("<Q", len(bank)),
           np.asarray(bank.sdf_raw, "<f4").tobytes(),
           np.asarray(bank.color_feat, "<f4").tobytes()]
    recs = [r for lvl in (Level.DENSE, Level.SPARSE) for r in store.records(lvl)]
    out.append(struct.pack("<Q", len(recs)))
    table = np.array([(int(r.key.level), *r.key[:3], *r.vertex_ids) for r in recs],
                     dtype="<i8").reshape(-1, 12)
    out.append(table.tobytes())
    for name in Decoder.names:
        out.append(np.asarray(decoder.params[name], "<f4").tobytes())
    return b"".join(out)


def save_checkpoint(path, store, bank, decoder, activation="tanh"):
    Path(path).write_bytes(checkpoint_bytes(store, bank, decoder, activation))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise LoadError(f"{path}: not a checkpoint")
    pos = 8

    def take(fmt_, n=1):
        nonlocal pos
        vals = struct.unpack_from("<" + fmt_ * n, data, pos)
        pos += struct.calcsize("<" + fmt_ * n)
        return vals

    (version,) = take("Q")
    if version != VERSION:
        raise LoadError(f"{path}: unsupported checkpoint version {version}")
    (edge,) = take("d")
    act, a, h = take("Q", 3)
    (n,) = take("Q")

    def arr(count, dtype="<f4"):
        nonlocal pos
        x = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
        pos += x.nbytes
        return x.astype(np.float64 if dtype == "<f4" else np.int64)

    sdf = arr(n)
    feat = arr(n * a).reshape(n, a)
    (m,) = take("Q")
    table = arr(12 * m, "<i8").reshape(m, 12)
    store = VoxelStore.restore(edge, [((r[1], r[2], r[3], r[0]), r[4:]) for r in table], n)
    bank = VertexBank(a)
    bank.sdf_raw, bank.color_feat = sdf, feat
    level = np.zeros(n, dtype=np.int8)
    for r in table:
        level[r[4:]] = r[0]
    bank.level = level
    store.bank = bank
    shapes = Decoder(a, h).shapes()
    decoder = Decoder(a, h, params={k: arr(int(np.prod(shapes[k]))).reshape(shapes[k])
                                    for k in Decoder.names})
    if pos != len(data):
        raise LoadError(f"{path}: {len(data) - pos} trailing bytes")
    return Checkpoint(store, bank, decoder, _ACTIVATIONS[act])
