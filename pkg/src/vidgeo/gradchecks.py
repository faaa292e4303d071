"""Finite-difference verification suites for every differentiable surface:
core tensor ops, the neural primitives, and end-to-end scalars through the
backbone, the coupled stack, the geometry heads, and each loss.

Model-level checks run a real (tiny) parameter bag with every zero
initialization re-randomized, so gradients cannot hide behind zero gates,
zeroed output projections, or zeroed heads.  run_suite returns
(module, check, worst relative error) rows; everything must sit below TOL.
"""

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import config as configfile
from . import heads as hd
from . import irg
from . import losses
from . import nnops
from . import trainer
from .backbone import ConfigError

TOL = 1e-4

_TINY = """
[data]
frames = 5
height = 32
width = 32
[model]
blocks = 3
pcb = 1
width = 16
heads = 2
mlp_ratio = 2
cam_blocks = 2
cond_dim = 8
cam_feat = 4
geo_width = 12
registers = 1
bridge_blocks = 1
timesteps = 20
sample_steps = 2
taps = 1,2
factors = 1.0,2.0
fusion_width = 6
seed = 3
"""

_CACHE = {}


def _R(seed):
    return np.random.default_rng(seed)


def _fixture():
    """Tiny model + one synthetic sample, built once per process."""
    if _CACHE:
        return _CACHE
    conf = configfile.parse_config(_TINY)
    bag, cfg, dcfg = trainer.build_model(conf)
    rng = _R(7)
    base = {}
    for name, lf in bag.leaves():
        val = np.array(lf.value, dtype=np.float64)
        if not val.any():        # zero init would silence upstream grads
            val = 0.3 * rng.standard_normal(val.shape)
        base[name] = ad.leaf(val, requires_grad=False)
    T, H, W = 5, 32, 32
    rows = np.zeros((T, 9))
    rows[:, 0] = 1.0
    rows[:, 4:7] = 0.2 * rng.standard_normal((T, 3))
    rows[:, 7:9] = (0.9, 0.7)
    gt = (rng.random((T, H, W)) + 0.5, np.ones((T, H, W), dtype=bool),
          rng.standard_normal((T, H, W, 3)), rows)
    zshape = bb.latent_shape(T, H, W) + (cfg.width,)
    fx = dict(conf=conf, cfg=cfg, dcfg=dcfg, base=base, rows=rows, gt=gt,
              w=configfile.loss_weights(conf), T=T, H=H, W=W,
              ref=rng.random((H, W, 3)),
              z_t=rng.standard_normal(zshape),
              eps=rng.standard_normal(zshape))
    # frozen-path values reused by the geometry-side checks
    feats = irg.pose_encoder(fx["base"], cfg, rows, H, W)
    betas = irg.camera_shift_betas(fx["base"], cfg, feats)
    cond = bb.conditioning(fx["base"], cfg, "g", fx["ref"], 3)
    toks, grid = bb.precondition(fx["base"], cfg, fx["z_t"], cond, betas)
    fx["cond_v"] = cond.value
    fx["betas_v"] = {k: v.value for k, v in betas.items()}
    fx["toks_v"], fx["grid"] = toks.value, grid
    _CACHE.update(fx)
    return _CACHE


def _model_check(names, forward, coords=3):
    fx = _fixture()
    missing = [n for n in names if n not in fx["base"]]
    if missing:
        raise ConfigError("unknown parameter %s" % missing[0])

    def build(*lv):
        d = dict(fx["base"])
        d.update(zip(names, lv))
        return forward(d, fx)

    arrays = [np.array(fx["base"][n].value) for n in names]
    return ad.check_grad(build, arrays, coords=coords, rng=_R(0))


# ------------------------------------------------------------- autodiff

def _ck_elementwise():
    x = _R(1).standard_normal((3, 4))

    def build(v):
        y = ad.exp(ad.tanh(v) * 0.5) + ad.sigmoid(v) + ad.softplus(v)
        return (y + ad.erf(v) + ad.log(ad.sqrt(v * v + 1.0))).sum()

    return ad.check_grad(build, [x])


def _ck_shaping():
    rng = _R(2)
    x, w = rng.standard_normal((4, 6)), rng.standard_normal((6, 5))

    def build(a, b):
        y = ad.transpose(ad.matmul(a, b), (1, 0)).reshape((20,))
        z = ad.concat([y, y * 2.0], 0)
        return z[3:15].sum() + ad.take(a, np.array([0, 2]), 0).mean()

    return ad.check_grad(build, [x, w])


def _ck_norm_forms():
    rng = _R(3)
    x = rng.uniform(-0.9, 0.9, (5, 6))
    g, b = rng.standard_normal(6), rng.standard_normal(6)
    c = rng.standard_normal((5, 6))

    def build(v, gg, bb_):
        s = (ad.softmax_lastdim(v) * c).sum()
        s = s + ad.layer_norm(v, gg, bb_).sum() * 0.1
        s = s + ad.l2norm_lastdim(v).sum()
        # both Huber branches, inputs kept clear of the |r| = 1 kink
        return s + ad.huber_elem(v * 0.3).sum() + ad.huber_elem(v + 2.0).sum()

    return ad.check_grad(build, [x, g, b])


# ---------------------------------------------------------------- nnops

def _ck_linear_act():
    rng = _R(4)
    x, w, b = (rng.standard_normal((3, 4)), rng.standard_normal((4, 2)),
               rng.standard_normal(2))
    return ad.check_grad(
        lambda *a: (nnops.gelu(nnops.linear(*a))
                    + nnops.silu(nnops.linear(*a))).sum(), [x, w, b])


def _ck_attention():
    rng = _R(5)
    arrs = [rng.standard_normal((4, 6))] + \
           [rng.standard_normal((6, 6)) for _ in range(4)]
    return ad.check_grad(lambda x, *w: nnops.attention(x, *w, 2).sum(),
                         arrs, coords=20, rng=_R(0))


def _ck_conv2d():
    rng = _R(6)
    x = rng.standard_normal((2, 5, 4, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)
    return ad.check_grad(lambda *a: nnops.conv2d(*a, stride=2).sum(),
                         [x, w, b], coords=25, rng=_R(0))


def _ck_resize():
    x = _R(8).standard_normal((2, 4, 3, 2))
    return max(ad.check_grad(
        lambda v: nnops.resize_bilinear(v, (7, 5)).sum(), [x]),
        ad.check_grad(lambda v: nnops.resize_nearest(v, (3, 7)).sum(), [x]))


def _ck_temporal():
    rng = _R(9)
    x = rng.standard_normal((3, 2, 2))
    w = rng.standard_normal((3, 2, 2))
    b = rng.standard_normal(2)
    return ad.check_grad(
        lambda *a: nnops.causal_conv_time(
            nnops.temporal_dup(a[0]), a[1], a[2]).sum(), [x, w, b])


# -------------------------------------------------------------- backbone

def _bb_forward(d, fx):
    cond = bb.conditioning(d, fx["cfg"], "g", fx["ref"], 3)
    feats = irg.pose_encoder(d, fx["cfg"], fx["rows"], fx["H"], fx["W"])
    betas = irg.camera_shift_betas(d, fx["cfg"], feats)
    eps_hat = bb.run_backbone(d, fx["cfg"], fx["z_t"], cond, betas)
    return losses.diffusion_loss(eps_hat, fx["eps"])


def _ck_backbone_denoise():
    return _model_check(
        ["backbone.block01.wq", "backbone.block02.w1", "backbone.cond.w1",
         "backbone.eps.w", "backbone.patch.w0"], _bb_forward)


# ------------------------------------------------------------------- irg

def _ck_cross_attention():
    c, cg = 6, 4
    rng = _R(10)
    names = ["wq_v", "wk_v", "wv_v", "wq_g", "wk_g", "wv_g", "wo_v", "wo_g",
             "gamma_v", "gamma_g"]
    arrs = [rng.standard_normal((c, c)) / 2, rng.standard_normal((c, c)) / 2,
            rng.standard_normal((c, cg)) / 2,
            rng.standard_normal((cg, c)) / 2,
            rng.standard_normal((cg, c)) / 2,
            rng.standard_normal((cg, c)) / 2,
            rng.standard_normal((c, c)) / 2,
            rng.standard_normal((cg, cg)) / 2,
            np.asarray(0.5), np.asarray(-0.3),
            rng.standard_normal((4, c)), rng.standard_normal((6, cg))]

    def build(*lv):
        d = dict(zip(["t." + n for n in names], lv[:-2]))
        a, b = irg.bi_cross_attn(d, "t.", lv[-2], lv[-1])
        return a.sum() + b.sum()

    return ad.check_grad(build, arrs, coords=6, rng=_R(0))


def _pose_shift_forward(d, fx):
    feats = irg.pose_encoder(d, fx["cfg"], fx["rows"], fx["H"], fx["W"])
    betas = irg.camera_shift_betas(d, fx["cfg"], feats)
    out = None
    for v in betas.values():
        out = v.sum() if out is None else out + v.sum()
    return out * 0.1


def _ck_pose_camera_shift():
    return _model_check(
        ["pose_enc.conv1.w", "pose_enc.conv3.b", "pose_enc.lvl01.w",
         "cam_shift.block01.w", "cam_shift.block02.b"], _pose_shift_forward)


def _coupled_forward(d, fx):
    cfg, dcfg = fx["cfg"], fx["dcfg"]
    cond = ad.constant(fx["cond_v"])
    betas = {k: ad.constant(v) for k, v in fx["betas_v"].items()}
    toks, grid = bb.precondition(d, cfg, fx["z_t"], cond, betas)
    x_g = irg.bridge(d, cfg, toks, grid)
    x_v, x_g, tapped = irg.irg_stack(d, cfg, toks, x_g, cond, betas,
                                     dcfg.taps, grid)
    out = bb.eps_head(d, x_v).mean() * 3.0
    for _, tap in tapped:
        out = out + tap.mean()
    return out + x_g.mean()


def _ck_coupled_stack():
    return _model_check(
        ["xattn.block01.gamma_v", "xattn.block01.gamma_g",
         "xattn.block01.wv_v", "xattn.block02.wq_g", "bridge.proj_w",
         "geo.block01.wq", "backbone.block02.wv"], _coupled_forward)


# ----------------------------------------------------------------- heads

def _geometry_forward(d, fx):
    cfg, dcfg = fx["cfg"], fx["dcfg"]
    x_g = irg.bridge(d, cfg, ad.constant(fx["toks_v"]), fx["grid"])
    x_g, tapped = trainer._geo_stack(d, cfg, dcfg, x_g, fx["grid"])
    outs = hd.predict_geometry(d, cfg, dcfg, tapped, x_g, fx["grid"],
                               fx["T"], fx["H"], fx["W"])
    geo, _ = trainer._geo_parts(outs, fx["gt"], fx["w"], "1")
    return geo


def _ck_geometry_decode():
    return _model_check(
        ["bridge.cam_tok", "geo.block02.w2", "heads.pyr.reasm.lvl01.w",
         "heads.pyr.fuse.final.c1", "heads.tup.conv1.w", "heads.depth.c1",
         "heads.pmap.out", "heads.cam.w"], _geometry_forward, coords=2)


# ---------------------------------------------------------------- losses

def _ck_loss_diffusion():
    rng = _R(11)
    pred, eps = rng.standard_normal((2, 3, 3, 4)), _R(12).standard_normal((2, 3, 3, 4))
    return ad.check_grad(lambda p: losses.diffusion_loss(p, eps), [pred])


def _ck_loss_depth_terms():
    rng = _R(13)
    d_gt = rng.random((3, 4, 4)) + 0.5
    d_pred = d_gt + 0.2 * rng.standard_normal(d_gt.shape)
    valid = rng.random(d_gt.shape) > 0.2

    def build(p):
        return (losses.tgm_loss(p, d_gt, valid)
                + losses.frame_depth_loss(p, d_gt, valid))

    return ad.check_grad(build, [d_pred])


def _ck_loss_pointmap():
    rng = _R(14)
    p_gt = rng.standard_normal((2, 4, 4, 3))
    p_pred = p_gt + 0.3 * rng.standard_normal(p_gt.shape)
    sigma = rng.random((2, 4, 4)) + 0.3
    valid = np.ones((2, 4, 4), dtype=bool)
    return ad.check_grad(
        lambda p, s: losses.pmap_loss(p, p_gt, s, valid, 0.1),
        [p_pred, sigma], coords=12, rng=_R(0))


def _ck_loss_camera():
    rng = _R(15)
    gt = np.zeros((4, 9))
    gt[:, 0] = 1.0
    gt[:, 7:9] = 0.9
    pred = gt + 0.3 * rng.standard_normal(gt.shape)
    return ad.check_grad(lambda p: losses.camera_loss(p, gt, 1.0), [pred])


def _ck_loss_composition():
    vals = np.array([0.7, 1.3, 0.4, 2.1])

    def build(v):
        geo = losses.geo_loss(v[0], v[1], v[2], "final")
        return losses.total_loss(v[3], geo, 0.7)

    return ad.check_grad(build, [vals])


SUITES = {
    "autodiff": [("elementwise", _ck_elementwise),
                 ("shaping", _ck_shaping),
                 ("norm_forms", _ck_norm_forms)],
    "nnops": [("linear_act", _ck_linear_act),
              ("attention", _ck_attention),
              ("conv2d", _ck_conv2d),
              ("resize", _ck_resize),
              ("temporal", _ck_temporal)],
    "backbone": [("denoise_loss", _ck_backbone_denoise)],
    "irg": [("cross_attention", _ck_cross_attention),
            ("pose_camera_shift", _ck_pose_camera_shift),
            ("coupled_stack", _ck_coupled_stack)],
    "heads": [("geometry_decode", _ck_geometry_decode)],
    "losses": [("diffusion", _ck_loss_diffusion),
               ("depth_terms", _ck_loss_depth_terms),
               ("pointmap", _ck_loss_pointmap),
               ("camera", _ck_loss_camera),
               ("composition", _ck_loss_composition)],
}


def run_suite(module=None):
    """Run one module's checks (or all); returns (module, name, err) rows."""
    if module is None:
        picked = SUITES
    elif module in SUITES:
        picked = {module: SUITES[module]}
    else:
        raise ConfigError("unknown gradcheck module %r (choose from %s)"
                          % (module, ", ".join(sorted(SUITES))))
    return [(mod, name, float(fn()))
            for mod, checks in picked.items() for name, fn in checks]
