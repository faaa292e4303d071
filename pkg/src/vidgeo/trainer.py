"""Three-stage training, the optimizer, checkpointing, and inference.

Stage 0 teaches the video trunk (plus the camera machinery) to denoise on
its own.  Stage 1 freezes that trunk and fits the geometry branch against
exact labels, reading the trunk's front-group features through the bridge.
Stage 2 freezes both trunks and opens the gated coupling: only the
cross-attention adapters and the camera-shift projections move, driven by
the denoising loss plus a weighted geometry loss on the coupled outputs.

Gradients come from one tape per sample; per-sample roots are pre-scaled by
1/batch so plain accumulation over the batch yields the mean gradient, which
is then clipped to a global norm of 1 and fed to AdamW.  Every random draw
in a run flows through a single generator whose state is checkpointed, so a
resumed run replays the remaining steps bit for bit.
"""

import json
import os
import shutil

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import config as configfile
from . import heads as hd
from . import irg
from . import losses
from .backbone import ConfigError, StateError
from .params import ParamBag

GRAD_CLIP = 1.0         # global-norm ceiling on the batch gradient

# trainable prefixes per stage; the patch and image projections never move
STAGE_TRAINABLE = {
    "stage0": ("backbone.", "pose_enc.", "cam_shift."),
    "stage1": ("bridge.", "geo.", "heads."),
    "stage2": ("xattn.", "cam_shift."),
}
PERMANENT_FROZEN = ("backbone.patch.", "backbone.cond.img_w")
GROUPS = ("backbone", "pose_enc", "cam_shift", "bridge", "geo", "xattn",
          "heads")
_PREV_STAGE = {"stage0": None, "stage1": "stage0", "stage2": "stage1"}


class NanAbort(RuntimeError):
    """A non-finite gradient or loss; names the offending quantity."""

    def __init__(self, name, step):
        super().__init__("non-finite value in %r at step %d" % (name, step))
        self.param = name
        self.step = step


# -------------------------------------------------------------- optimizer

class OptimState:
    """Adam moment buffers keyed by parameter name, the shared step
    counter, and the hyperparameters driving the update."""

    def __init__(self, hp=None):
        self.m = {}
        self.v = {}
        self.step = 0
        self.hp = dict(hp) if hp else {"lr": 1e-3, "beta1": 0.9,
                                       "beta2": 0.999, "eps": 1e-8,
                                       "weight_decay": 0.0}


def adamw_step(params, grads, state, hp=None):
    """One decoupled-weight-decay Adam update, in place.

    params is a list of (name, array); grads maps name -> array, where a
    missing or None gradient counts as zero (decay still applies).  Both
    moments are bias-corrected with the shared step counter."""
    hp = state.hp if hp is None else hp
    state.step += 1
    c1 = 1.0 - hp["beta1"] ** state.step
    c2 = 1.0 - hp["beta2"] ** state.step
    for name, val in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(val)
        if not np.all(np.isfinite(g)):
            raise NanAbort(name, state.step)
        if name not in state.m:
            state.m[name] = np.zeros_like(val)
            state.v[name] = np.zeros_like(val)
        m, v = state.m[name], state.v[name]
        m *= hp["beta1"]
        m += (1.0 - hp["beta1"]) * g
        v *= hp["beta2"]
        v += (1.0 - hp["beta2"]) * (g * g)
        step_dir = (m / c1) / (np.sqrt(v / c2) + hp["eps"])
        val -= hp["lr"] * (step_dir + hp["weight_decay"] * val)


# ---------------------------------------------------------- model assembly

def build_model(conf):
    """One parameter bag holding trunk, geometry branch, and heads, built
    deterministically from the [model] section."""
    cfg, dcfg = configfile.model_config(conf)
    bag = ParamBag()
    rng = np.random.default_rng(conf["model"]["seed"])
    bb.build_backbone(bag, cfg, rng)
    irg.build_irg(bag, cfg, rng)
    hd.build_heads(bag, cfg, dcfg, rng)
    return bag, cfg, dcfg


def apply_freeze(bag, stage):
    """Point the optimizer at the stage's groups and nothing else."""
    if stage not in STAGE_TRAINABLE:
        raise ConfigError("unknown stage %r" % stage)
    bag.freeze_all()
    hit = bag.set_trainable(STAGE_TRAINABLE[stage], True)
    bag.set_trainable(PERMANENT_FROZEN, False)
    if hit == 0:
        raise ConfigError("freeze plan for %s matched no parameters" % stage)
    return hit


def group_checksums(bag):
    return {g: bag.checksum(g + ".") for g in GROUPS}


# ------------------------------------------------------------- checkpoints

def save_checkpoint(path, stage, step, bag, state, conf, rng, log):
    """Checkpoint directory: manifest + raw float64 payloads + the config
    echo + the loss log so far.  Written to a temp dir and swapped in."""
    tmp = path.rstrip(os.sep) + ".tmp"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    man = ["version=1", "stage=%s" % stage, "step=%d" % step,
           "rng=%s" % json.dumps(rng.bit_generator.state,
                                 separators=(",", ":")),
           "optim_step=%d" % state.step]
    with open(os.path.join(tmp, "params.bin"), "wb") as fh:
        for name in bag.names():
            lf = bag[name]
            v = np.asarray(lf.value, dtype="<f8")
            fh.write(v.tobytes())
            dims = ",".join(str(d) for d in v.shape) or "-"
            man.append("param %s %s %d" % (name, dims, int(lf.requires_grad)))
    moments = sorted(state.m)
    with open(os.path.join(tmp, "optim.bin"), "wb") as fh:
        for name in moments:
            fh.write(np.asarray(state.m[name], "<f8").tobytes())
            fh.write(np.asarray(state.v[name], "<f8").tobytes())
            man.append("optim %s" % name)
    with open(os.path.join(tmp, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(configfile.config_text(conf))
    with open(os.path.join(tmp, "train_log.txt"), "w",
              encoding="utf-8") as fh:
        for line in log:
            fh.write(line + "\n")
    with open(os.path.join(tmp, "manifest.txt"), "w",
              encoding="utf-8") as fh:
        fh.write("\n".join(man) + "\n")
    if os.path.exists(path):
        shutil.rmtree(path)
    os.rename(tmp, path)


def _parse_dims(s):
    return () if s == "-" else tuple(int(d) for d in s.split(","))


def load_checkpoint(path):
    """Rebuild the model from the stored config echo, then load parameters,
    optimizer moments, generator state, and the loss log."""
    man_path = os.path.join(path, "manifest.txt")
    if not os.path.isdir(path) or not os.path.exists(man_path):
        raise StateError("no checkpoint at %s" % path)
    with open(man_path, "r", encoding="utf-8") as fh:
        man = fh.read().splitlines()
    head = {}
    entries = []
    moments = []
    for line in man:
        if line.startswith("param "):
            _, name, dims, flag = line.split()
            entries.append((name, _parse_dims(dims), bool(int(flag))))
        elif line.startswith("optim "):
            moments.append(line.split()[1])
        elif "=" in line:
            k, v = line.split("=", 1)
            head[k] = v
    if head.get("version") != "1":
        raise StateError("unsupported checkpoint version %r"
                         % head.get("version"))
    with open(os.path.join(path, "config.txt"), "r", encoding="utf-8") as fh:
        conf = configfile.parse_config(fh.read())
    bag, cfg, dcfg = build_model(conf)
    arrays = {}
    with open(os.path.join(path, "params.bin"), "rb") as fh:
        for name, dims, _ in entries:
            n = int(np.prod(dims, dtype=np.int64)) if dims else 1
            arrays[name] = np.fromfile(fh, "<f8", n).reshape(dims)
    bag.load_state(arrays)
    for name, _, flag in entries:
        bag[name].requires_grad = flag
    state = OptimState()
    state.step = int(head.get("optim_step", "0"))
    shape_of = {name: dims for name, dims, _ in entries}
    with open(os.path.join(path, "optim.bin"), "rb") as fh:
        for name in moments:
            n = int(np.prod(shape_of[name], dtype=np.int64)) \
                if shape_of[name] else 1
            state.m[name] = np.fromfile(fh, "<f8", n).reshape(shape_of[name])
            state.v[name] = np.fromfile(fh, "<f8", n).reshape(shape_of[name])
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(head["rng"])
    log = []
    log_path = os.path.join(path, "train_log.txt")
    if os.path.exists(log_path):
        with open(log_path, "r", encoding="utf-8") as fh:
            log = fh.read().splitlines()
    return {"bag": bag, "cfg": cfg, "dcfg": dcfg, "conf": conf,
            "stage": head["stage"], "step": int(head["step"]),
            "state": state, "rng": rng, "log": log}


# ------------------------------------------------------ per-clip constants

class _ClipCache:
    """Deterministic per-clip precomputations.  feats/betas bake the pose
    pyramid and camera projections, so they are only valid while those
    parameters are frozen — stage 0 must not read them."""

    def __init__(self, bag, cfg, clips):
        self._bag, self._cfg, self._clips = bag, cfg, clips
        self._z0, self._gt, self._feats, self._betas = {}, {}, {}, {}

    def z0(self, i):
        if i not in self._z0:
            self._z0[i] = bb.patchify(self._bag, self._clips[i].frames)
        return self._z0[i]

    def gt(self, i):
        if i not in self._gt:
            c = self._clips[i]
            self._gt[i] = (c.depth.astype(np.float64), c.valid > 0,
                           c.points.astype(np.float64),
                           c.poses.astype(np.float64))
        return self._gt[i]

    def rows(self, i):
        return self.gt(i)[3]

    def feats(self, i):
        if i not in self._feats:
            c = self._clips[i]
            H, W = c.frames.shape[1:3]
            fs = irg.pose_encoder(self._bag, self._cfg, self.rows(i), H, W)
            self._feats[i] = [f.value for f in fs]
        return self._feats[i]

    def betas(self, i):
        if i not in self._betas:
            fs = [ad.constant(f) for f in self.feats(i)]
            out = irg.camera_shift_betas(self._bag, self._cfg, fs)
            self._betas[i] = {k: b.value for k, b in out.items()}
        return self._betas[i]


# ------------------------------------------------------------ stage losses

_ZERO_PARTS = {n: 0.0 for n in losses.LossReport.FIELDS if n != "total"}


def _geo_parts(outs, gt, w, stage):
    """Geometry losses against exact labels; returns the aggregate plus the
    raw per-term floats for the log."""
    d_gt, valid, p_gt, rows = gt
    tgm = losses.tgm_loss(outs["depth"], d_gt, valid)
    frame = losses.frame_depth_loss(outs["depth"], d_gt, valid)
    depth_l = w.tgm * tgm + w.frame * frame
    pmap = losses.pmap_loss(outs["points"], p_gt, outs["conf"], valid, w.conf)
    cam = losses.camera_loss(outs["poses"], rows, w.delta)
    geo = losses.geo_loss(depth_l, pmap, cam, stage, w.stage1)
    parts = dict(_ZERO_PARTS, tgm=float(tgm.value), frame=float(frame.value),
                 pmap=float(pmap.value), cam=float(cam.value),
                 geo=float(geo.value))
    return geo, parts


def _geo_stack(bag, cfg, dcfg, x_g, grid):
    """Geometry blocks alone (no coupling): the stage-1 forward."""
    t = grid[0]
    s = x_g.shape[0] // t
    tapped = []
    for k in range(1, cfg.n_irg + 1):
        x_g = bb.block_forward(bag, "geo.block%02d." % k, x_g, cfg.heads)
        if k in dcfg.taps:
            tapped.append((k, x_g.reshape((t, s, cfg.geo_width))))
    return x_g, tapped


def _draw(rng, cfg, z0, schedule):
    t_step = int(rng.integers(1, cfg.timesteps + 1))
    eps = rng.standard_normal(z0.shape)
    return t_step, eps, schedule.mix(z0, eps, schedule.alpha_bar(t_step))


def _stage0_sample(bag, cfg, cache, clip, i, rng, schedule, inv_batch):
    t_step, eps, z_t = _draw(rng, cfg, cache.z0(i), schedule)
    H, W = clip.frames.shape[1:3]
    with ad.Graph():
        cond = bb.conditioning(bag, cfg, clip.text, clip.frames[0], t_step)
        feats = irg.pose_encoder(bag, cfg, cache.rows(i), H, W)
        betas = irg.camera_shift_betas(bag, cfg, feats)
        eps_hat = bb.run_backbone(bag, cfg, z_t, cond, betas)
        diff = losses.diffusion_loss(eps_hat, eps)
        ad.backward(diff * inv_batch)
        val = float(diff.value)
    return dict(_ZERO_PARTS, diff=val)


def _stage1_sample(bag, cfg, dcfg, cache, clip, i, rng, schedule, w,
                   inv_batch):
    t_step, eps, z_t = _draw(rng, cfg, cache.z0(i), schedule)
    T, H, W = clip.frames.shape[:3]
    # everything up to the bridge is frozen here: run it off-tape
    cond = bb.conditioning(bag, cfg, clip.text, clip.frames[0], t_step)
    betas = {k: ad.constant(v) for k, v in cache.betas(i).items()}
    toks, grid = bb.precondition(bag, cfg, z_t, cond, betas,
                                 require_frozen=True)
    toks_v = toks.value
    with ad.Graph():
        x_g = irg.bridge(bag, cfg, ad.constant(toks_v), grid)
        x_g, tapped = _geo_stack(bag, cfg, dcfg, x_g, grid)
        outs = hd.predict_geometry(bag, cfg, dcfg, tapped, x_g, grid,
                                   T, H, W)
        geo, parts = _geo_parts(outs, cache.gt(i), w, "1")
        ad.backward(geo * inv_batch)
    return parts


def _stage2_sample(bag, cfg, dcfg, cache, clip, i, rng, schedule, w,
                   inv_batch):
    t_step, eps, z_t = _draw(rng, cfg, cache.z0(i), schedule)
    T, H, W = clip.frames.shape[:3]
    cond_v = bb.conditioning(bag, cfg, clip.text, clip.frames[0],
                             t_step).value
    feats_v = cache.feats(i)
    with ad.Graph():
        cond = ad.constant(cond_v)
        feats = [ad.constant(f) for f in feats_v]
        betas = irg.camera_shift_betas(bag, cfg, feats)
        toks, grid = bb.precondition(bag, cfg, z_t, cond, betas,
                                     require_frozen=True)
        x_g = irg.bridge(bag, cfg, toks, grid)
        x_v, x_g, tapped = irg.irg_stack(bag, cfg, toks, x_g, cond, betas,
                                         dcfg.taps, grid)
        eps_hat = bb.eps_head(bag, x_v).reshape(grid + (cfg.width,))
        diff = losses.diffusion_loss(eps_hat, eps)
        outs = hd.predict_geometry(bag, cfg, dcfg, tapped, x_g, grid,
                                   T, H, W)
        geo, parts = _geo_parts(outs, cache.gt(i), w, "final")
        total = losses.total_loss(diff, geo, w.lam)
        ad.backward(total * inv_batch)
    parts["diff"] = float(diff.value)
    return parts


# ------------------------------------------------------------ the run loop

def _aggregate(tag, k, parts_list, lam):
    """Batch means per term.  The logged total is recomposed from the mean
    terms — total = diff + lam*geo exactly — so the weighting is auditable
    from the log alone."""
    means = {f: float(np.mean([p[f] for p in parts_list]))
             for f in _ZERO_PARTS}
    if tag == "stage0":
        total = means["diff"]
    elif tag == "stage1":
        total = means["geo"]
    else:
        total = means["diff"] + lam * means["geo"]
    for name, v in list(means.items()) + [("total", total)]:
        if not np.isfinite(v):
            raise NanAbort("loss %s" % name, k)
    return losses.LossReport(step=k, total=total, **means)


def _run_loop(tag, bag, cfg, dcfg, conf, clips, out_path, steps, rng, state,
              log, start, emit):
    hp = configfile.stage_hparams(conf, tag)
    state.hp = {k: hp[k] for k in ("lr", "beta1", "beta2", "eps",
                                   "weight_decay")}
    batch = hp["batch"]
    w = configfile.loss_weights(conf)
    schedule = bb.NoiseSchedule(cfg.timesteps)
    cache = _ClipCache(bag, cfg, clips)
    inv_batch = 1.0 / batch
    reports = []
    for k in range(start, steps):
        bag.zero_grads()
        idx = rng.integers(0, len(clips), size=batch)
        parts_list = []
        for i in idx:
            i = int(i)
            clip = clips[i]
            if tag == "stage0":
                parts = _stage0_sample(bag, cfg, cache, clip, i, rng,
                                       schedule, inv_batch)
            elif tag == "stage1":
                parts = _stage1_sample(bag, cfg, dcfg, cache, clip, i, rng,
                                       schedule, w, inv_batch)
            else:
                parts = _stage2_sample(bag, cfg, dcfg, cache, clip, i, rng,
                                       schedule, w, inv_batch)
            parts_list.append(parts)
        rep = _aggregate(tag, k, parts_list, w.lam)
        reports.append(rep)
        line = rep.to_line()
        log.append(line)
        if emit is not None:
            emit(line)
        trainables = bag.leaves(trainable=True)
        norm2 = 0.0
        for _, lf in trainables:
            if lf.grad is not None:
                norm2 += float((lf.grad * lf.grad).sum())
        norm = np.sqrt(norm2)
        if norm > GRAD_CLIP:
            for _, lf in trainables:
                if lf.grad is not None:
                    lf.grad *= GRAD_CLIP / norm
        grads = {n: lf.grad for n, lf in trainables}
        adamw_step([(n, lf.value) for n, lf in trainables], grads, state,
                   state.hp)
    save_checkpoint(out_path, tag, steps, bag, state, conf, rng, log)
    return reports


def _train_stage(tag, clips, conf, out_path, seed, init, resume, steps,
                 emit):
    if not clips:
        raise StateError("no clips to train on")
    if steps is None:
        steps = conf[tag]["steps"]
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck["stage"] != tag:
            raise StateError("resume checkpoint is %s, not %s"
                             % (ck["stage"], tag))
        if configfile.config_text(ck["conf"]) != configfile.config_text(conf):
            raise ConfigError("resume config differs from checkpoint config")
        bag, cfg, dcfg = ck["bag"], ck["cfg"], ck["dcfg"]
        state, rng, log, start = ck["state"], ck["rng"], ck["log"], ck["step"]
    else:
        prev = _PREV_STAGE[tag]
        if prev is None:
            bag, cfg, dcfg = build_model(conf)
        else:
            if init is None:
                raise StateError("%s training requires a %s checkpoint"
                                 % (tag, prev))
            ck = load_checkpoint(init)
            if ck["stage"] != prev:
                raise StateError("initial checkpoint is %s, want %s"
                                 % (ck["stage"], prev))
            if ck["conf"]["model"] != conf["model"]:
                raise ConfigError("[model] differs from the initial "
                                  "checkpoint's")
            bag, cfg, dcfg = ck["bag"], ck["cfg"], ck["dcfg"]
        state = OptimState()
        rng = np.random.default_rng(seed)
        log = []
        start = 0
    apply_freeze(bag, tag)
    return _run_loop(tag, bag, cfg, dcfg, conf, clips, out_path, steps, rng,
                     state, log, start, emit)


def pretrain_backbone(clips, conf, out_path, seed, resume=None, steps=None,
                      emit=None):
    """Stage 0: denoising-only training of the video trunk plus the camera
    machinery; writes a stage0 checkpoint."""
    return _train_stage("stage0", clips, conf, out_path, seed, None, resume,
                        steps, emit)


def train_stage1(clips, conf, out_path, init, seed, resume=None, steps=None,
                 emit=None):
    """Stage 1: geometry branch + heads against exact labels, reading the
    frozen trunk's front-group features; needs a stage0 checkpoint."""
    return _train_stage("stage1", clips, conf, out_path, seed, init, resume,
                        steps, emit)


def train_stage2(clips, conf, out_path, init, seed, resume=None, steps=None,
                 emit=None):
    """Stage 2: open the gated coupling — adapters and camera shifts only —
    against denoising + weighted geometry; needs a stage1 checkpoint."""
    return _train_stage("stage2", clips, conf, out_path, seed, init, resume,
                        steps, emit)


# --------------------------------------------------------------- inference

def infer(bag, cfg, dcfg, ref_frame, text, poses, seed):
    """Sample a clip from pure noise, conditioned on one reference frame, a
    text tag, and a camera trajectory; geometry is decoded once from the
    final sampler step's branch state.  Deterministic in (inputs, seed)."""
    ref = np.asarray(ref_frame, dtype=np.float64)
    if ref.ndim != 3 or ref.shape[2] != 3:
        raise ad.DimensionError("reference frame must be (H, W, 3), got %s"
                                % (ref.shape,))
    if isinstance(poses, np.ndarray):
        rows = np.asarray(poses, dtype=np.float64)
    else:
        rows = np.stack([p.as_9d() for p in poses])
    T = rows.shape[0]
    H, W = ref.shape[:2]
    grid = bb.latent_shape(T, H, W)
    feats = irg.pose_encoder(bag, cfg, rows, H, W)
    betas = irg.camera_shift_betas(bag, cfg, feats)
    schedule = bb.NoiseSchedule(cfg.timesteps)
    rng = np.random.default_rng(seed)
    cell = {}

    def eps_fn(z, t_step):
        cond = bb.conditioning(bag, cfg, text, ref, t_step)
        toks, g = bb.precondition(bag, cfg, z, cond, betas)
        x_g = irg.bridge(bag, cfg, toks, g)
        x_v, x_g, tapped = irg.irg_stack(bag, cfg, toks, x_g, cond, betas,
                                         dcfg.taps, g)
        cell["tapped"], cell["x_g"] = tapped, x_g
        return bb.eps_head(bag, x_v).reshape(grid + (cfg.width,)).value

    x0 = bb.ddim_sample(schedule, grid + (cfg.width,), eps_fn, rng,
                        cfg.sample_steps)
    frames = np.clip(bb.unpatchify(bag, x0, T, H, W), 0.0, 1.0)
    geo = hd.predict_geometry(bag, cfg, dcfg, cell["tapped"], cell["x_g"],
                              grid, T, H, W)
    return {"frames": frames, "depth": geo["depth"].value,
            "points": geo["points"].value, "conf": geo["conf"].value,
            "poses": geo["poses"].value}
