"""Command-line entry point: ``neuv {run,synth,mesh,render,eval}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import eval as metrics
from . import io, synth
from .field import FieldParams
from .mesh import extract_mesh
from .render import RenderConfig, render_image
from .slam import Slam, SlamConfig

log = logging.getLogger("neuv")

LOSS_COLUMNS = ["frame", "timestamp", "lost", "new_dense", "new_sparse", "discarded",
                "voxels", "vertices", "track_total", "color_l1", "depth_l1", "sdf_term",
                "total", "rays"]


def _cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return io.fmt(v)
    return v


def run_slam(dataset: io.Dataset, cfg: SlamConfig, out: Path, oracle: bool = False,
             max_frames: int = 0) -> Slam:
    out.mkdir(parents=True, exist_ok=True)
    if oracle and dataset.gt_poses is None:
        raise SystemExit("--gt-pose-oracle needs groundtruth.txt in the dataset")
    slam = Slam(dataset.camera, cfg)
    (out / "config.txt").write_text(io.dump_config(cfg))
    n = len(dataset) if not max_frames else min(max_frames, len(dataset))
    t0 = time.perf_counter()
    with open(out / "losses.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOSS_COLUMNS)
        for i in range(n):
            frame = dataset.frame(i)
            gt = dataset.gt_poses[i] if dataset.gt_poses is not None else None
            rec = slam.process_frame(frame, gt, oracle=oracle)
            writer.writerow([_cell(rec[k]) for k in LOSS_COLUMNS])
            log.info("frame %d/%d  total %.4f  voxels %d  (%.1fs)", i + 1, n, rec["total"],
                     rec["voxels"], time.perf_counter() - t0)
            if cfg.checkpoint_interval and (i + 1) % cfg.checkpoint_interval == 0:
                io.save_checkpoint(out / f"checkpoint_{i:06d}.bin", slam.store, slam.bank,
                                   slam.decoder, cfg.field.activation)
    if cfg.refine_iterations and slam.keyframes:
        slam.refine(cfg.refine_iterations)
        log.info("refined %d steps  (%.1fs)", cfg.refine_iterations, time.perf_counter() - t0)
    io.write_trajectory(slam.trajectory, slam.timestamps, out / "trajectory.txt")
    io.save_checkpoint(out / "checkpoint.bin", slam.store, slam.bank, slam.decoder,
                       cfg.field.activation)
    return slam


def cmd_run(args):
    cfg = io.load_config(args.config) if args.config else SlamConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    for flag, attr in (("canny_low", "canny_low"), ("canny_high", "canny_high"),
                       ("point_stride", "point_stride")):
        v = getattr(args, flag)
        if v is not None:
            setattr(cfg.edge, attr, v)
    dataset = io.load_dataset(args.dataset)
    run_slam(dataset, cfg, Path(args.out), oracle=args.gt_pose_oracle, max_frames=args.frames)


def cmd_synth(args):
    scene = synth.SCENES[args.scene]()
    preset = dict(synth.PRESETS[args.scene])
    poses = synth.orbit_trajectory(preset.pop("center"), preset.pop("radius"), args.frames,
                                   **preset)
    cam = synth.default_camera(args.width, args.height)
    rng = np.random.default_rng(args.seed)
    frames = [synth.render_frame(scene, p, cam, args.depth_noise, rng) for p in poses]
    io.write_dataset(args.out, cam, frames, poses)


def _field_from_checkpoint(path) -> FieldParams:
    ck = io.load_checkpoint(path)
    return FieldParams(ck.store.view(), ck.bank.sdf_raw, ck.bank.color_feat, ck.decoder,
                       ck.activation)


def cmd_mesh(args):
    mesh = extract_mesh(_field_from_checkpoint(args.checkpoint))
    io.write_ply(mesh, args.out)
    log.info("wrote %d vertices, %d faces", len(mesh.vertices), len(mesh.faces))


def cmd_render(args):
    params = _field_from_checkpoint(args.checkpoint)
    cam = io.read_intrinsics(args.intrinsics) if args.intrinsics else synth.default_camera()
    rcfg = io.load_config(args.config).render if args.config else RenderConfig(step=args.step)
    pose = io.pose_from_tum([float(x) for x in args.pose.split()])
    rgb, depth, _ = render_image(params, cam, pose, rcfg)
    io.write_png(rgb, f"{args.out}_color.png")
    io.write_png(io.depth_to_raw(depth, cam.depth_scale), f"{args.out}_depth.png")


def cmd_eval(args):
    if args.what == "ate":
        _, est = io.read_trajectory(args.est)
        _, gt = io.read_trajectory(args.gt)
        report = {"aligned": metrics.ate(est, gt, True).as_dict(),
                  "raw": metrics.ate(est, gt, False).as_dict()}
    elif args.what == "render":
        img, ref = io.read_color(args.img), io.read_color(args.ref)
        report = {"psnr": metrics.psnr(img, ref), "ssim": metrics.ssim(img, ref)}
        if args.depth and args.ref_depth:
            d = io.read_depth(args.depth, args.depth_scale)
            r = io.read_depth(args.ref_depth, args.depth_scale)
            report["depth_l1"] = metrics.depth_l1(d, r)
            report["psnr_masked"] = metrics.psnr(img, ref, mask=r > 0)
    else:
        recon = io.read_ply(args.mesh)
        gt = synth.SCENES[args.gt]() if args.gt in synth.SCENES else io.read_ply(args.gt)
        report = metrics.mesh_metrics(recon, gt, args.n_points,
                                      np.random.default_rng(args.seed)).as_dict()
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neuv", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="track and map a dataset")
    r.add_argument("--dataset", required=True)
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--gt-pose-oracle", action="store_true",
                   help="skip tracking and map with ground-truth poses")
    r.add_argument("--frames", type=int, default=0, help="process only the first N frames")
    r.add_argument("--canny-low", type=float)
    r.add_argument("--canny-high", type=float)
    r.add_argument("--point-stride", type=int)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("synth", help="render a synthetic RGB-D dataset")
    s.add_argument("--scene", choices=sorted(synth.SCENES), required=True)
    s.add_argument("--frames", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--width", type=int, default=160)
    s.add_argument("--height", type=int, default=120)
    s.add_argument("--depth-noise", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    m = sub.add_parser("mesh", help="extract a mesh from a checkpoint")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mesh)

    v = sub.add_parser("render", help="render colour and depth from a checkpoint")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--pose", required=True, help='"tx ty tz qx qy qz qw"')
    v.add_argument("--out", required=True, help="output prefix")
    v.add_argument("--intrinsics")
    v.add_argument("--config")
    v.add_argument("--step", type=float, default=RenderConfig.step)
    v.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="metrics as JSON")
    e.add_argument("what", choices=["ate", "render", "mesh"])
    e.add_argument("--est")
    e.add_argument("--gt")
    e.add_argument("--img")
    e.add_argument("--ref")
    e.add_argument("--depth")
    e.add_argument("--ref-depth")
    e.add_argument("--depth-scale", type=float, default=1.0 / 5000)
    e.add_argument("--mesh")
    e.add_argument("--n-points", type=int, default=100_000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    if args.command == "eval":
        need = {"ate": ("est", "gt"), "render": ("img", "ref"), "mesh": ("mesh", "gt")}[args.what]
        missing = [n for n in need if getattr(args, n) is None]
        if missing:
            build_parser().error(f"eval {args.what} needs " + ", ".join("--" + n for n in missing))
    try:
        args.func(args)
    except (io.LoadError, io.ConfigError) as exc:
        print(f"neuv: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
