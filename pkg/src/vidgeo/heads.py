"""Geometry heads on top of the tapped geometry states: an inverted
reassembly maps deeper taps onto finer grids, a coarse-to-fine fusion
pyramid merges them, a causal temporal stack restores the full frame rate,
and three zero-initialized heads read off depth, confidence-carrying point
maps, and per-frame 9-number cameras. At build time the heads emit the
fixed neutral outputs (uniform depth, zero points, identity camera), so
nothing downstream sees noise before training starts.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nnops
from .backbone import ConfigError

DEPTH_FLOOR = 1e-4


@dataclass(frozen=True)
class DPT3DConfig:
    """Which geometry-stack states feed the pyramid and at what scale.
    Deeper taps land on finer grids, so factors must strictly increase."""

    taps: tuple = (2, 3, 4, 6)
    factors: tuple = (0.5, 1.0, 2.0, 4.0)
    fusion_width: int = 32

    def __post_init__(self):
        if len(self.taps) != len(self.factors):
            raise ConfigError("%d taps vs %d factors"
                              % (len(self.taps), len(self.factors)))
        if not all(a < b for a, b in zip(self.taps, self.taps[1:])):
            raise ConfigError("taps %s must strictly increase" % (self.taps,))
        if not all(a < b for a, b in zip(self.factors, self.factors[1:])):
            raise ConfigError("factors %s must strictly increase"
                              % (self.factors,))
        if self.fusion_width < 1:
            raise ConfigError("fusion width %d" % self.fusion_width)


def build_heads(bag, cfg, dcfg, rng):
    cg, fw = cfg.geo_width, dcfg.fusion_width
    for i in range(1, len(dcfg.taps) + 1):
        bag.add("heads.pyr.reasm.lvl%02d.w" % i,
                rng.standard_normal((cg, fw)) / np.sqrt(cg))
    for i in range(2, len(dcfg.taps) + 1):
        for nm in ("c1", "c2"):
            bag.add("heads.pyr.fuse.lvl%02d.%s" % (i, nm),
                    rng.standard_normal((3, 3, fw, fw)) / np.sqrt(9 * fw))
    for nm in ("c1", "c2"):
        bag.add("heads.pyr.fuse.final.%s" % nm,
                rng.standard_normal((3, 3, fw, fw)) / np.sqrt(9 * fw))
    eye_t = np.zeros((3, fw, fw))
    eye_t[2] = np.eye(fw)
    for j in (1, 2):
        bag.add("heads.tup.conv%d.w" % j, eye_t.copy())
        bag.add("heads.tup.conv%d.b" % j, np.zeros(fw))
    bag.add("heads.depth.c1", rng.standard_normal((3, 3, fw, fw)) / np.sqrt(9 * fw))
    bag.add("heads.depth.out", np.zeros((1, 1, fw, 1)))
    bag.add("heads.pmap.c1", rng.standard_normal((3, 3, fw, fw)) / np.sqrt(9 * fw))
    bag.add("heads.pmap.out", np.zeros((1, 1, fw, 4)))
    eye_c = np.zeros((3, cg, cg))
    eye_c[2] = np.eye(cg)
    bag.add("heads.cam.ln1_g", np.ones(cg))
    bag.add("heads.cam.ln1_b", np.zeros(cg))
    for j in (1, 2):
        bag.add("heads.cam.conv%d.w" % j, eye_c.copy())
        bag.add("heads.cam.conv%d.b" % j, np.zeros(cg))
    bag.add("heads.cam.ln2_g", np.ones(cg))
    bag.add("heads.cam.ln2_b", np.zeros(cg))
    bag.add("heads.cam.w", np.zeros((cg, 9)))
    bag.add("heads.cam.b", np.array([1.0] + [0.0] * 8))


# ---------------------------------------------------------------- pyramid

def reassemble_inverted(bag, cfg, dcfg, taps, grid):
    """Tapped (ordinal, (t, S, c_g)) states -> one feature map per level.
    Special slots are dropped, patch tokens land back on the latent grid,
    and level i is resampled by its factor (deeper taps end up finer)."""
    if [k for k, _ in taps] != list(dcfg.taps):
        raise ConfigError("tap order %s does not match configured %s"
                          % ([k for k, _ in taps], list(dcfg.taps)))
    t, h, w = grid
    out = []
    for i, (_, x) in enumerate(taps, start=1):
        patch = x[:, 1 + cfg.registers:, :].reshape((t, h, w, cfg.geo_width))
        y = nnops.linear(patch, bag["heads.pyr.reasm.lvl%02d.w" % i])
        f = dcfg.factors[i - 1]
        hw = (max(1, int(np.floor(h * f))), max(1, int(np.floor(w * f))))
        out.append(nnops.resize_nearest(y, hw))
    return out


def _rcu(bag, prefix, x):
    h = nnops.silu(nnops.conv2d(x, bag[prefix + "c1"]))
    return x + nnops.conv2d(h, bag[prefix + "c2"])


def fuse(bag, levels, grid):
    """Coarse-to-fine merge of the reassembled levels; every stage is
    bias-free, so an all-zero pyramid fuses to exactly zero. Output lands on
    the (t, 4h, 4w) grid regardless of the finest factor."""
    _, h, w = grid
    x = levels[0]
    for i, lvl in enumerate(levels[1:], start=2):
        x = nnops.resize_bilinear(x, lvl.shape[1:3]) + lvl
        x = _rcu(bag, "heads.pyr.fuse.lvl%02d." % i, x)
    x = nnops.resize_bilinear(x, (4 * h, 4 * w))
    return _rcu(bag, "heads.pyr.fuse.final.", x)


def temporal_upsample(bag, x):
    """(t, H', W', c) -> (4(t-1)+1, H', W', c) by two rounds of aligned
    duplication plus causal mixing; identity kernels at build make this pure
    duplication, and no output frame ever reads a later slot."""
    t, hh, ww, c = x.shape
    y = x.reshape((t, hh * ww, c))
    for j in (1, 2):
        y = nnops.temporal_dup(y)
        y = nnops.causal_conv_time(y, bag["heads.tup.conv%d.w" % j],
                                   bag["heads.tup.conv%d.b" % j])
    return y.reshape((y.shape[0], hh, ww, c))


# ------------------------------------------------------------------ heads

def predict_depth(bag, feat, H, W):
    h = nnops.silu(nnops.conv2d(feat, bag["heads.depth.c1"]))
    raw = nnops.conv2d(h, bag["heads.depth.out"])
    raw = nnops.resize_bilinear(raw, (H, W))
    d = ad.softplus(raw) + DEPTH_FLOOR
    return d.reshape((feat.shape[0], H, W))


def predict_pointmap(bag, feat, H, W):
    """Point map plus per-pixel scale: exp keeps the scale channel positive
    with exact 1.0 at the zero-initialized build point."""
    h = nnops.silu(nnops.conv2d(feat, bag["heads.pmap.c1"]))
    raw = nnops.conv2d(h, bag["heads.pmap.out"])
    raw = nnops.resize_bilinear(raw, (H, W))
    pts = raw[:, :, :, 0:3]
    sigma = ad.exp(raw[:, :, :, 3])
    return pts, sigma


def predict_camera(bag, x_g, grid):
    """Per-slot camera tokens -> per-frame 9-number poses. The zero-init
    readout plus its fixed bias yields the identity pose everywhere; the
    quaternion is renormalized, fov squashed into (0, pi)."""
    t = grid[0]
    cg = x_g.shape[-1]
    cam = x_g.reshape((t, x_g.shape[0] // t, cg))[:, 0, :]
    h = ad.layer_norm(cam, bag["heads.cam.ln1_g"], bag["heads.cam.ln1_b"])
    for j in (1, 2):
        h = nnops.temporal_dup(h)
        h = ad.conv1d_temporal(h, bag["heads.cam.conv%d.w" % j],
                               padding="causal") + bag["heads.cam.conv%d.b" % j]
    h = ad.layer_norm(h, bag["heads.cam.ln2_g"], bag["heads.cam.ln2_b"])
    raw = nnops.linear(h, bag["heads.cam.w"], bag["heads.cam.b"])
    norm = ad.l2norm_lastdim(raw[:, 0:4])
    quat = raw[:, 0:4] / (norm + 1e-12).reshape((raw.shape[0], 1))
    fov = ad.sigmoid(raw[:, 7:9]) * np.pi
    return ad.concat([quat, raw[:, 4:7], fov], axis=1)


def predict_geometry(bag, cfg, dcfg, taps, x_g, grid, T, H, W):
    """Everything after the geometry stack in one call: fused pyramid ->
    full-rate features -> depth / point map / confidence / cameras."""
    levels = reassemble_inverted(bag, cfg, dcfg, taps, grid)
    feat = temporal_upsample(bag, fuse(bag, levels, grid))
    depth = predict_depth(bag, feat, H, W)
    pts, sigma = predict_pointmap(bag, feat, H, W)
    poses = predict_camera(bag, x_g, grid)
    if feat.shape[0] != T:
        raise ad.DimensionError("temporal stack gave %d frames for %d"
                                % (feat.shape[0], T))
    return {"depth": depth, "points": pts, "conf": sigma, "poses": poses}
