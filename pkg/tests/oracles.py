"""Independent reference computations shared by unit and acceptance tests."""

import numpy as np

from conftest import make_params, random_store, randomize
from neuv.field import Decoder, FieldParams
from neuv.geometry import Camera, pixel_rays, se3_exp
from neuv.render import RenderConfig, SampleSet, render_backward, render_rays
from neuv.slam import LossConfig, compute_loss
from neuv.synth import look_at


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


class GatedDecoder(Decoder):
    """Decoder whose ReLU on/off pattern is frozen per input row.

    Finite differences through it follow the linear branch the base point
    sits on, which is what the analytic gradient describes.
    """

    def __init__(self, dec: Decoder, gate1, gate2):
        super().__init__(dec.in_dim, dec.hidden, params=dec.params)
        self.params = dec.params  # share storage so bumps are seen
        self.gate1, self.gate2 = gate1, gate2

    def forward(self, feat):
        p = self.params
        z1 = feat @ p["w1"] + p["b1"]
        h1 = z1 * self.gate1
        z2 = h1 @ p["w2"] + p["b2"]
        h2 = z2 * self.gate2
        z3 = h2 @ p["w3"] + p["b3"]
        rgb = 1.0 / (1.0 + np.exp(-z3))
        return rgb, (feat, z1, h1, z2, h2, rgb)


def mini_scene(rng, n_rays=48):
    """Random two-level voxel cluster, random field, a camera looking at it."""
    store, bank = random_store(rng, n_sparse=3, n_dense=6, spread=1)
    dec = Decoder(bank.feature_dim, seed=int(rng.integers(1 << 20)))
    randomize(bank, dec, rng, sdf_scale=0.3, feat_scale=0.5)
    params = make_params(store, bank, dec)
    cam = Camera(30.0, 30.0, 15.5, 11.5, 32, 24)
    eye = rng.normal(size=3)
    eye = 1.2 * eye / np.linalg.norm(eye)
    pose = look_at(eye, rng.normal(0, 0.05, 3), up=(0.3, 0.2, 1.0))
    u = rng.uniform(0, cam.width - 1, 4 * n_rays)
    v = rng.uniform(0, cam.height - 1, 4 * n_rays)
    cfg = RenderConfig(step=0.02, truncation=0.05, t_min=0.05)
    o, d, _ = pixel_rays(u, v, cam, pose)
    out = render_rays(params, o, d, cfg)
    pick = np.flatnonzero(out.hit)[:n_rays]
    u, v = u[pick], v[pick]
    # supervision is offset from the rendering by a margin so that no L1
    # residual sits near its kink, where central differences are meaningless
    sign = rng.choice([-1.0, 1.0], len(pick))
    gt_t = out.depth[pick] + sign * rng.uniform(0.01, 0.04, len(pick))
    rgb = out.rgb[pick]
    gt_rgb = np.where(rgb > 0.5, rgb - rng.uniform(0.05, 0.4, rgb.shape),
                      rgb + rng.uniform(0.05, 0.4, rgb.shape))
    return params, cam, pose, u, v, gt_t, gt_rgb, cfg


def loss_gradient_check(rng, h=1e-4, n_vertex=24, n_decoder=8, loss_cfg=None):
    """Analytic vs central-difference gradients of the total loss.

    Discrete choices (samples, voxel membership, truncation mask and the
    decoder's ReLU gates) are frozen from the base pass, so the differences
    stay on one smooth branch.  Returns relative errors per parameter class.
    """
    loss_cfg = loss_cfg or LossConfig(free_space=0.5)
    params, cam, pose, u, v, gt_t, gt_rgb, cfg = mini_scene(rng)
    o, d, _ = pixel_rays(u, v, cam, pose)
    base = render_rays(params, o, d, cfg)
    samples = SampleSet(base.n_rays, base.ray, base.t, np.zeros(len(base.t), np.int64))
    pinned = (base.pe.level, base.pe.row)
    keep = base.keep
    _, z1, _, z2, _, _ = base.pe.cache
    gated = FieldParams(params.view, params.sdf_raw, params.color_feat,
                        GatedDecoder(params.decoder, z1 > 0, z2 > 0), params.activation)

    def total(p=pose):
        oo, dd, _ = pixel_rays(u, v, cam, p)
        out = render_rays(gated, oo, dd, cfg, samples=samples, pinned=pinned, keep=keep)
        loss, _ = compute_loss(out, gt_rgb, gt_t, loss_cfg)
        return loss.total

    loss, grads = compute_loss(base, gt_rgb, gt_t, loss_cfg)
    g, g_pose = render_backward(params, base, grads.depth, grads.rgb, grads.sdf, need_pose=True)

    def central(bump):
        bump(+h)
        fp = total()
        bump(-2 * h)
        fm = total()
        bump(+h)
        return (fp - fm) / (2 * h)

    def entry(arr, idx):
        def bump(delta):
            arr[idx] += delta
        return central(bump)

    compare = rel_err

    used = np.unique(base.pe.vids[base.o > 0])
    vids = rng.choice(used, size=min(n_vertex, len(used)), replace=False)
    errs = {"sdf": compare(g.sdf_raw[vids], [entry(params.sdf_raw, i) for i in vids])}
    fidx = [(i, int(rng.integers(params.color_feat.shape[1]))) for i in vids]
    errs["feat"] = compare([g.color_feat[i] for i in fidx],
                           [entry(params.color_feat, i) for i in fidx])
    dec_a, dec_n = [], []
    for name, arr in params.decoder.params.items():
        flat = arr.reshape(-1)
        for i in rng.choice(flat.size, size=min(n_decoder, flat.size), replace=False):
            dec_a.append(g.decoder[name].reshape(-1)[i])
            dec_n.append(entry(flat, i))
    errs["decoder"] = compare(dec_a, dec_n)
    num_pose = []
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        num_pose.append((total(se3_exp(e) @ pose) - total(se3_exp(-e) @ pose)) / (2 * h))
    errs["pose"] = compare(g_pose, num_pose)
    return errs
