"""Video-token trunk. A fixed patch embedding stands in for a video VAE at
the same compression factors (16x each spatial axis, 4x temporal with the
first frame kept alone), so every latent-shape law downstream is real.
On top of it: sinusoidal position codes, hash/projection conditioning stubs
fused by a trainable MLP, pre-norm transformer blocks with shift/scale
timestep modulation, a linear-signal noise schedule with a deterministic
coarse-stride sampler, and the front block group that partially denoises
tokens before the dual-branch section of the trunk.
"""

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import nnops

PATCH = 16        # pixels per token along each spatial axis
TGROUP = 4        # frames folded into one temporal slot (frame 0 alone)


class StateError(RuntimeError):
    """A stage precondition on mutable training state was violated."""


class ConfigError(ValueError):
    """A configuration asked for a wiring the model cannot realize."""


@dataclass(frozen=True)
class BackboneConfig:
    blocks: int = 10          # transformer depth of the video trunk
    pcb: int = 4              # front blocks run before the dual-branch part
    width: int = 128
    heads: int = 4
    mlp_ratio: int = 4
    cam_blocks: int = 6       # leading blocks that receive camera shifts
    cond_dim: int = 64
    cam_feat: int = 32        # per-block channel width of camera features
    geo_width: int = 128
    registers: int = 4        # register tokens per temporal slot
    bridge_blocks: int = 2
    timesteps: int = 1000
    sample_steps: int = 50

    def __post_init__(self):
        if not 0 <= self.pcb < self.blocks:
            raise ad.ContractError("front group %d must stay below depth %d"
                                   % (self.pcb, self.blocks))
        if not 0 <= self.cam_blocks <= self.blocks:
            raise ad.ContractError("camera blocks %d outside depth %d"
                                   % (self.cam_blocks, self.blocks))
        for nm, w in (("width", self.width), ("geo_width", self.geo_width)):
            if w % self.heads:
                raise ad.ContractError("%s %d not divisible by %d heads"
                                       % (nm, w, self.heads))

    @property
    def n_irg(self):
        return self.blocks - self.pcb


def latent_shape(T, H, W):
    """Clip extents -> latent grid (t, h, w); offending extent named."""
    if T < 1 or (T - 1) % TGROUP:
        raise ad.ContractError("frame count %d is not 4(t-1)+1" % T)
    if H % PATCH:
        raise ad.ContractError("height %d not divisible by %d" % (H, PATCH))
    if W % PATCH:
        raise ad.ContractError("width %d not divisible by %d" % (W, PATCH))
    return (T - 1) // TGROUP + 1, H // PATCH, W // PATCH


# ------------------------------------------------------------ fixed codes

def sinusoid(pos, dim):
    """Interleaved sin/cos codes with geometric frequencies; returns
    pos.shape + (dim,) float64."""
    pos = np.asarray(pos, dtype=np.float64)
    half = (dim + 1) // 2
    freq = np.exp(-np.log(10000.0) * np.arange(half) / max(1, half - 1))
    ang = pos[..., None] * freq
    out = np.zeros(pos.shape + (dim,))
    out[..., 0::2] = np.sin(ang)[..., :half]
    out[..., 1::2] = np.cos(ang)[..., :dim // 2]
    return out


@lru_cache(maxsize=32)
def pos_grid(t, h, w, c):
    """Additive 3-axis position code for a (t, h, w) token grid, width c."""
    ct = cy = c // 3
    cx = c - 2 * ct
    out = np.zeros((t, h, w, c))
    out[..., :ct] = sinusoid(np.arange(t), ct)[:, None, None]
    out[..., ct:ct + cy] = sinusoid(np.arange(h), cy)[None, :, None]
    out[..., ct + cy:] = sinusoid(np.arange(w), cx)[None, None, :]
    out.setflags(write=False)
    return out


def text_embed(text, dim):
    """Deterministic unit-scale vector from a hash of the text tag."""
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8],
                          "little")
    return np.random.default_rng(seed).standard_normal(dim) / np.sqrt(dim)


def image_stub(frame):
    """Reference frame -> 192 numbers: 8x8 area-mean thumbnail, flattened.
    8 cells per axis keeps coarse object layout while staying resolution
    independent (any frame with sides divisible by 8)."""
    H, W, _ = frame.shape
    if H % 8 or W % 8:
        raise ad.ContractError("reference frame %dx%d not divisible by 8"
                               % (H, W))
    return np.asarray(frame, dtype=np.float64).reshape(
        8, H // 8, 8, W // 8, 3).mean(axis=(1, 3)).ravel()


# ---------------------------------------------------------- noise schedule

@dataclass(frozen=True)
class NoiseSchedule:
    """Signal coefficients fall linearly: alpha_bar(t) = 1 - t/(n+1), so the
    first step is nearly clean and the last nearly pure noise."""

    n_steps: int = 1000

    def alpha_bar(self, t):
        t = int(t)
        if not 1 <= t <= self.n_steps:
            raise ad.ContractError("timestep %d outside [1, %d]"
                                   % (t, self.n_steps))
        return 1.0 - t / (self.n_steps + 1.0)

    @staticmethod
    def mix(z0, eps, ab):
        return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps

    def add_noise(self, z0, t, eps):
        if np.shape(eps) != np.shape(z0):
            raise ad.DimensionError("noise %s vs signal %s"
                                    % (np.shape(eps), np.shape(z0)))
        return self.mix(z0, eps, self.alpha_bar(t))

    def sample_times(self, steps):
        """Descending coarse stride over [1, n], endpoints included."""
        ts = np.linspace(self.n_steps, 1, steps).round().astype(int)
        return np.unique(ts)[::-1].copy()


def ddim_sample(schedule, shape, eps_fn, rng, steps):
    """Deterministic sampler: start from unit noise and walk the schedule
    down, re-mixing the clean estimate with the predicted noise at each
    stride; the final stride lands on the clean estimate itself."""
    x = rng.standard_normal(shape)
    ts = schedule.sample_times(steps)
    for i, t in enumerate(ts):
        eps = eps_fn(x, int(t))
        ab = schedule.alpha_bar(int(t))
        x0 = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        ab_next = schedule.alpha_bar(int(ts[i + 1])) if i + 1 < len(ts) else 1.0
        x = np.sqrt(ab_next) * x0 + np.sqrt(1.0 - ab_next) * eps
    return x


# ------------------------------------------------------- patch tokenizer

def patchify(bag, frames):
    """(T, H, W, 3) frames -> (t, h, w, c) tokens through the fixed
    projections: frame 0 embeds alone, each later group of 4 frames folds
    into one temporal slot."""
    frames = np.asarray(frames, dtype=ad.default_dtype())
    T, H, W, _ = frames.shape
    t, h, w = latent_shape(T, H, W)
    p = PATCH
    w0 = bag["backbone.patch.w0"].value
    w1 = bag["backbone.patch.w1"].value
    out = np.empty((t, h, w, w0.shape[1]), dtype=frames.dtype)
    f0 = frames[0].reshape(h, p, w, p, 3).transpose(0, 2, 1, 3, 4)
    out[0] = f0.reshape(h, w, p * p * 3) @ w0
    if t > 1:
        rest = frames[1:].reshape(t - 1, TGROUP, h, p, w, p, 3)
        rest = rest.transpose(0, 2, 4, 1, 3, 5, 6).reshape(t - 1, h, w, -1)
        out[1:] = rest @ w1
    return out


def unpatchify(bag, z, T, H, W, inverses=None):
    """Tokens back to (T, H, W, 3) frames through the least-squares
    inverses of the patch projections (or an explicit inverse pair)."""
    z = np.asarray(z, dtype=np.float64)
    t, h, w = latent_shape(T, H, W)
    p = PATCH
    if inverses is None:
        p0 = np.linalg.pinv(bag["backbone.patch.w0"].value.astype(np.float64))
        p1 = np.linalg.pinv(bag["backbone.patch.w1"].value.astype(np.float64))
    else:
        p0, p1 = inverses
    out = np.empty((T, H, W, 3))
    f0 = (z[0] @ p0).reshape(h, w, p, p, 3).transpose(0, 2, 1, 3, 4)
    out[0] = f0.reshape(H, W, 3)
    if t > 1:
        rest = (z[1:] @ p1).reshape(t - 1, h, w, TGROUP, p, p, 3)
        out[1:] = rest.transpose(0, 3, 1, 4, 2, 5, 6).reshape(T - 1, H, W, 3)
    return out


# ------------------------------------------------------------ construction

def add_block_params(bag, prefix, c, mlp_ratio, rng, zero_out, ada_dim=0):
    """One pre-norm transformer block. zero_out zeroes both residual output
    projections so the block is the identity at build time; ada_dim > 0 adds
    a zero-initialized conditioning->modulation projection."""
    m = mlp_ratio * c
    bag.add(prefix + "ln1_g", np.ones(c))
    bag.add(prefix + "ln1_b", np.zeros(c))
    bag.add(prefix + "ln2_g", np.ones(c))
    bag.add(prefix + "ln2_b", np.zeros(c))
    for nm in ("wq", "wk", "wv"):
        bag.add(prefix + nm, rng.standard_normal((c, c)) / np.sqrt(c))
    bag.add(prefix + "wo",
            np.zeros((c, c)) if zero_out else rng.standard_normal((c, c)) / np.sqrt(c))
    bag.add(prefix + "w1", rng.standard_normal((c, m)) / np.sqrt(c))
    bag.add(prefix + "b1", np.zeros(m))
    bag.add(prefix + "w2",
            np.zeros((m, c)) if zero_out else rng.standard_normal((m, c)) / np.sqrt(m))
    bag.add(prefix + "b2", np.zeros(c))
    if ada_dim:
        bag.add(prefix + "ada_w", np.zeros((ada_dim, 4 * c)))
        bag.add(prefix + "ada_b", np.zeros(4 * c))


def block_forward(bag, prefix, x, heads, cond=None):
    """Pre-norm attention + MLP residual block on flat (N, c) tokens; cond
    (if present) contributes shift/scale modulation to both norms."""
    c = bag[prefix + "wq"].shape[0]
    if x.shape[-1] != c:
        raise ad.DimensionError("block %s width %d, tokens %s"
                                % (prefix, c, x.shape))
    if cond is not None:
        mod = nnops.linear(cond, bag[prefix + "ada_w"], bag[prefix + "ada_b"])
        sh1, sc1 = mod[0 * c:1 * c], mod[1 * c:2 * c]
        sh2, sc2 = mod[2 * c:3 * c], mod[3 * c:4 * c]
    h = ad.layer_norm(x, bag[prefix + "ln1_g"], bag[prefix + "ln1_b"])
    if cond is not None:
        h = h * (sc1 + 1.0) + sh1
    x = x + nnops.attention(h, bag[prefix + "wq"], bag[prefix + "wk"],
                            bag[prefix + "wv"], bag[prefix + "wo"], heads)
    h = ad.layer_norm(x, bag[prefix + "ln2_g"], bag[prefix + "ln2_b"])
    if cond is not None:
        h = h * (sc2 + 1.0) + sh2
    return x + nnops.mlp(h, bag[prefix + "w1"], bag[prefix + "b1"],
                         bag[prefix + "w2"], bag[prefix + "b2"])


def build_backbone(bag, cfg, rng):
    """Video trunk parameters. Patch and image/text projections are fixed
    (never trainable); block output projections start at zero so every block
    is the identity and the noise head predicts zero at build time."""
    c, cd = cfg.width, cfg.cond_dim
    pd = PATCH * PATCH * 3
    bag.add("backbone.patch.w0",
            rng.standard_normal((pd, c)) / np.sqrt(pd), trainable=False)
    bag.add("backbone.patch.w1",
            rng.standard_normal((TGROUP * pd, c)) / np.sqrt(TGROUP * pd),
            trainable=False)
    bag.add("backbone.cond.img_w",
            rng.standard_normal((192, cd)) / np.sqrt(192), trainable=False)
    bag.add("backbone.cond.w1", rng.standard_normal((3 * cd, 4 * cd)) / np.sqrt(3 * cd))
    bag.add("backbone.cond.b1", np.zeros(4 * cd))
    bag.add("backbone.cond.w2", rng.standard_normal((4 * cd, cd)) / np.sqrt(4 * cd))
    bag.add("backbone.cond.b2", np.zeros(cd))
    for i in range(1, cfg.blocks + 1):
        add_block_params(bag, "backbone.block%02d." % i, c, cfg.mlp_ratio,
                         rng, zero_out=True, ada_dim=cd)
    bag.add("backbone.eps.ln_g", np.ones(c))
    bag.add("backbone.eps.ln_b", np.zeros(c))
    bag.add("backbone.eps.w", np.zeros((c, c)))
    bag.add("backbone.eps.b", np.zeros(c))


# ---------------------------------------------------------------- forward

def conditioning(bag, cfg, text, ref_frame, t_step):
    """Fuse the fixed text/image stubs with the timestep code into the
    (cond_dim,) modulation vector; only the fusion MLP is trainable."""
    cd = cfg.cond_dim
    img = image_stub(ref_frame) @ bag["backbone.cond.img_w"].value
    vec = np.concatenate([text_embed(text, cd), img,
                          sinusoid(float(t_step), cd)])
    h = nnops.linear(ad.constant(vec), bag["backbone.cond.w1"],
                     bag["backbone.cond.b1"])
    return nnops.linear(nnops.silu(h), bag["backbone.cond.w2"],
                        bag["backbone.cond.b2"])


def run_blocks(bag, cfg, x, grid, cond, betas, start, stop):
    """Blocks start..stop inclusive on flat (N, width) tokens. Block 1 owns
    the position code, so a front/back split composes bitwise with a full
    pass. betas maps a block index to its additive camera shift."""
    if start == 1 and stop >= 1:
        t, h, w = grid
        x = x + ad.constant(
            pos_grid(t, h, w, cfg.width).reshape(-1, cfg.width))
    for i in range(start, stop + 1):
        if betas is not None and i in betas:
            x = nnops.shift(x, betas[i])
        x = block_forward(bag, "backbone.block%02d." % i, x, cfg.heads, cond)
    return x


def eps_head(bag, x):
    h = ad.layer_norm(x, bag["backbone.eps.ln_g"], bag["backbone.eps.ln_b"])
    return nnops.linear(h, bag["backbone.eps.w"], bag["backbone.eps.b"])


def tokens_from_latent(z_t):
    z_t = np.asarray(z_t)
    t, h, w, c = z_t.shape
    return ad.constant(np.ascontiguousarray(z_t.reshape(-1, c))), (t, h, w)


def run_backbone(bag, cfg, z_t, cond, betas=None):
    """Full trunk pass: every block, then the noise head; returns predicted
    noise shaped like the (t, h, w, c) input latent."""
    x, grid = tokens_from_latent(z_t)
    x = run_blocks(bag, cfg, x, grid, cond, betas, 1, cfg.blocks)
    return eps_head(bag, x).reshape(grid + (cfg.width,))


def precondition(bag, cfg, z_t, cond, betas=None, require_frozen=False):
    """Front block group: partially denoised tokens that seed the
    dual-branch section. Returns (flat tokens, (t, h, w)). With
    require_frozen, any trainable trunk weight is a state error — the front
    group must be immutable once later stages own the optimization."""
    if require_frozen:
        loose = [n for n, _ in bag.leaves("backbone.", trainable=True)]
        if loose:
            raise StateError("video trunk must be frozen here; trainable: %s"
                             % loose[0])
    x, grid = tokens_from_latent(z_t)
    return run_blocks(bag, cfg, x, grid, cond, betas, 1, cfg.pcb), grid
