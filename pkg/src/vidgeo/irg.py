"""Dual-branch section of the trunk: a pose encoder turns per-frame ray maps
into one feature level per camera-controlled block, zero-initialized additive
shifts inject those features into the video tokens, a bridge re-embeds the
partially denoised tokens as geometry tokens (with camera/register slots
prepended per temporal slot), and gated bidirectional cross-attention couples
the two token streams once per remaining block pair. Both gates start at
zero, so at build time the video path is bitwise identical to the trunk
running alone.
"""

from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import cameras
from . import nnops

CONV_CH = (16, 32, 64, 128)     # pose pyramid widths; concat = 240 channels


def build_pose_encoder(bag, cfg, rng):
    cin = 6
    for i, cout in enumerate(CONV_CH, start=1):
        bag.add("pose_enc.conv%d.w" % i,
                rng.standard_normal((3, 3, cin, cout)) / np.sqrt(9 * cin))
        bag.add("pose_enc.conv%d.b" % i, np.zeros(cout))
        cin = cout
    width = sum(CONV_CH)
    for i in range(1, cfg.cam_blocks + 1):
        bag.add("pose_enc.lvl%02d.w" % i,
                rng.standard_normal((width, cfg.cam_feat)) / np.sqrt(width))
        bag.add("pose_enc.lvl%02d.b" % i, np.zeros(cfg.cam_feat))


def build_cam_shift(bag, cfg):
    """Per-block shift projections start at zero: camera injection is a
    no-op until training moves it."""
    for i in range(1, cfg.cam_blocks + 1):
        bag.add("cam_shift.block%02d.w" % i,
                np.zeros((cfg.cam_feat, cfg.width)))
        bag.add("cam_shift.block%02d.b" % i, np.zeros(cfg.width))


def build_bridge(bag, cfg, rng):
    cg = cfg.geo_width
    bag.add("bridge.proj_w", rng.standard_normal((cfg.width, cg)) / np.sqrt(cfg.width))
    bag.add("bridge.proj_b", np.zeros(cg))
    bag.add("bridge.cam_tok", 0.1 * rng.standard_normal(cg))
    bag.add("bridge.reg_tok", 0.1 * rng.standard_normal((cfg.registers, cg)))
    for i in range(1, cfg.bridge_blocks + 1):
        bb.add_block_params(bag, "bridge.block%02d." % i, cg, cfg.mlp_ratio,
                            rng, zero_out=True)


def build_geo_blocks(bag, cfg, rng):
    for k in range(1, cfg.n_irg + 1):
        bb.add_block_params(bag, "geo.block%02d." % k, cfg.geo_width,
                            cfg.mlp_ratio, rng, zero_out=False)


def build_adapters(bag, cfg, rng):
    """Cross-attention adapters, one per block pair past the front group.
    All four projection pairs exist even though each direction consumes only
    its own query/key half; the gates are scalars at zero."""
    c, cg = cfg.width, cfg.geo_width
    for k in range(1, cfg.n_irg + 1):
        p = "xattn.block%02d." % k
        bag.add(p + "wq_v", rng.standard_normal((c, c)) / np.sqrt(c))
        bag.add(p + "wk_v", rng.standard_normal((c, c)) / np.sqrt(c))
        bag.add(p + "wv_v", rng.standard_normal((c, cg)) / np.sqrt(c))
        bag.add(p + "wq_g", rng.standard_normal((cg, c)) / np.sqrt(cg))
        bag.add(p + "wk_g", rng.standard_normal((cg, c)) / np.sqrt(cg))
        bag.add(p + "wv_g", rng.standard_normal((cg, c)) / np.sqrt(cg))
        bag.add(p + "wo_v", rng.standard_normal((c, c)) / np.sqrt(c))
        bag.add(p + "wo_g", rng.standard_normal((cg, cg)) / np.sqrt(cg))
        bag.add(p + "gamma_v", 0.0)
        bag.add(p + "gamma_g", 0.0)


def build_irg(bag, cfg, rng):
    build_pose_encoder(bag, cfg, rng)
    build_cam_shift(bag, cfg)
    build_bridge(bag, cfg, rng)
    build_geo_blocks(bag, cfg, rng)
    build_adapters(bag, cfg, rng)


# ------------------------------------------------------------ pose encoder

def _group_time(f, t):
    """(T, ...) frame features -> (t, ...) slot features. Slot 0 keeps frame
    0; each later slot averages its 4 source frames pairwise, so identical
    frames stay bitwise equal after grouping."""
    if t == 1:
        return f[0:1]
    r = f[1:].reshape((t - 1, bb.TGROUP) + f.shape[1:])
    g = ((r[:, 0] + r[:, 1]) + (r[:, 2] + r[:, 3])) * 0.25
    return ad.concat([f[0:1], g], axis=0)


def pose_encoder(bag, cfg, poses, H, W):
    """Per-frame ray maps -> one (t, h, w, cam_feat) feature level per
    camera-controlled block. Strided conv pyramid, temporal grouping aligned
    with the patch tokenizer, all scales resampled onto the token grid."""
    if isinstance(poses, np.ndarray):
        poses = [cameras.CameraPose9.from_9d(v) for v in poses]
    T = len(poses)
    t, h, w = bb.latent_shape(T, H, W)
    rays = np.stack([cameras.plucker_encode(p, H, W) for p in poses])
    x = ad.constant(rays.astype(ad.default_dtype()))
    levels = []
    for i in range(1, len(CONV_CH) + 1):
        x = nnops.silu(nnops.conv2d(x, bag["pose_enc.conv%d.w" % i],
                                    bag["pose_enc.conv%d.b" % i], stride=2))
        levels.append(nnops.resize_nearest(_group_time(x, t), (h, w)))
    feat = ad.concat(levels, axis=-1)
    return [nnops.linear(feat, bag["pose_enc.lvl%02d.w" % i],
                         bag["pose_enc.lvl%02d.b" % i])
            for i in range(1, cfg.cam_blocks + 1)]


def camera_shift_betas(bag, cfg, feats):
    """Feature levels -> {block index: (N, width) additive shift}."""
    out = {}
    for i, f in enumerate(feats, start=1):
        t, h, w, _ = f.shape
        beta = nnops.linear(f, bag["cam_shift.block%02d.w" % i],
                            bag["cam_shift.block%02d.b" % i])
        out[i] = beta.reshape((t * h * w, cfg.width))
    return out


# ----------------------------------------------------------------- bridge

@lru_cache(maxsize=32)
def bridge_pos(t, s, c):
    """Additive position code for the (t, s) geometry token grid."""
    half = c // 2
    out = np.zeros((t, s, c))
    out[..., :half] = bb.sinusoid(np.arange(t), half)[:, None]
    out[..., half:] = bb.sinusoid(np.arange(s), c - half)[None, :]
    out.setflags(write=False)
    return out


def bridge(bag, cfg, tokens_v, grid):
    """Video tokens -> geometry tokens: re-embed, prepend one camera slot
    and the register slots per temporal slot, add position code, run the
    bridge blocks. Returns flat (t*(h*w+1+registers), geo_width) tokens."""
    t, h, w = grid
    cg = cfg.geo_width
    z = nnops.linear(tokens_v, bag["bridge.proj_w"], bag["bridge.proj_b"])
    z = z.reshape((t, h * w, cg))
    tile = ad.constant(np.zeros((t, 1, cg)))
    cam = tile + bag["bridge.cam_tok"].reshape((1, 1, cg))
    reg = ad.constant(np.zeros((t, cfg.registers, cg))) \
        + bag["bridge.reg_tok"].reshape((1, cfg.registers, cg))
    x = ad.concat([cam, reg, z], axis=1)
    s = 1 + cfg.registers + h * w
    x = (x + ad.constant(bridge_pos(t, s, cg))).reshape((t * s, cg))
    for i in range(1, cfg.bridge_blocks + 1):
        x = bb.block_forward(bag, "bridge.block%02d." % i, x, cfg.heads)
    return x


# ------------------------------------------------------- gated coupling

def bi_cross_attn(bag, prefix, x_v, x_g):
    """One shared attention map couples the streams both ways: video
    queries against geometry keys, its transpose routing video values back.
    Each residual is scaled by a scalar gate; with both gates at zero and no
    tape active the inputs pass through untouched."""
    gv, gg = bag[prefix + "gamma_v"], bag[prefix + "gamma_g"]
    if ad.active_graph() is None and gv.value == 0.0 and gg.value == 0.0:
        return x_v, x_g
    d = bag[prefix + "wq_v"].shape[1]
    q = ad.matmul(x_v, bag[prefix + "wq_v"])
    k = ad.matmul(x_g, bag[prefix + "wk_g"])
    att = ad.softmax_lastdim(ad.matmul(q, ad.transpose(k, (1, 0)))
                             / np.sqrt(d))
    up_v = ad.matmul(ad.matmul(att, ad.matmul(x_g, bag[prefix + "wv_g"])),
                     bag[prefix + "wo_v"])
    up_g = ad.matmul(ad.matmul(ad.transpose(att, (1, 0)),
                               ad.matmul(x_v, bag[prefix + "wv_v"])),
                     bag[prefix + "wo_g"])
    return x_v + gv * up_v, x_g + gg * up_g


def irg_stack(bag, cfg, x_v, x_g, cond, betas, taps, grid):
    """Blocks past the front group, video and geometry in lockstep: camera
    shift (when that block has one), coupling, then one block per stream.
    Returns the final streams plus the tapped geometry states as
    (ordinal, (t, S, geo_width)) pairs, in stack order."""
    for tap in taps:
        if not 1 <= tap <= cfg.n_irg:
            raise bb.ConfigError("tap %d outside 1..%d" % (tap, cfg.n_irg))
    t = grid[0]
    s = x_g.shape[0] // t
    tapped = []
    for k in range(1, cfg.n_irg + 1):
        i = cfg.pcb + k
        if betas is not None and i in betas:
            x_v = nnops.shift(x_v, betas[i])
        x_v, x_g = bi_cross_attn(bag, "xattn.block%02d." % k, x_v, x_g)
        x_v = bb.block_forward(bag, "backbone.block%02d." % i, x_v,
                               cfg.heads, cond)
        x_g = bb.block_forward(bag, "geo.block%02d." % k, x_g, cfg.heads)
        if k in taps:
            tapped.append((k, x_g.reshape((t, s, cfg.geo_width))))
    return x_v, x_g, tapped
