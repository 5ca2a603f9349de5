"""Full tracking + mapping on the synthetic room, with ATE and mesh metrics.

    python demos/room_slam.py --out runs/room
"""

import argparse
import json
from pathlib import Path

import numpy as np

from neuv import eval as metrics
from neuv import io, synth
from neuv.cli import main as neuv
from neuv.field import FieldParams
from neuv.mesh import extract_mesh

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/room")
    ap.add_argument("--frames", type=int, default=40)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    neuv(["synth", "--scene", "room", "--frames", str(args.frames), "--out", str(out / "data")])
    neuv(["-v", "run", "--dataset", str(out / "data"), "--config", str(HERE / "room.cfg"),
          "--out", str(out / "run"), "--seed", str(args.seed)])

    ds = io.load_dataset(out / "data")
    _, est = io.read_trajectory(out / "run" / "trajectory.txt")
    ck = io.load_checkpoint(out / "run" / "checkpoint.bin")
    mesh = extract_mesh(FieldParams(ck.store.view(), ck.bank.sdf_raw, ck.bank.color_feat,
                                    ck.decoder, ck.activation))
    io.write_ply(mesh, out / "mesh.ply")
    depths = [ds.frame(i).depth for i in range(len(ds))]
    report = {
        "ate": metrics.ate(est, ds.gt_poses).as_dict(),
        # completion counts only surface the cameras saw
        "mesh": metrics.mesh_metrics(
            mesh, synth.room_scene(), rng=np.random.default_rng(0),
            gt_filter=lambda p: metrics.observed_mask(p, ds.camera, ds.gt_poses, depths),
        ).as_dict(),
    }
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
