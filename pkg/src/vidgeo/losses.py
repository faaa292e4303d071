"""Training objectives: noise-prediction MSE, robust camera loss over
9-number poses, temporal-gradient and per-frame depth terms, a
confidence-weighted point-map loss, and the stage aggregates. All dense
terms mask by ground-truth validity — masked pixels contribute nothing to
value or gradient — and every loss is a differentiable scalar.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

FINAL_GEO = (1.0, 1.0, 3.0)     # depth / pointmap / camera in the final mix


@dataclass(frozen=True)
class LossWeights:
    tgm: float = 1.0                     # temporal term inside the depth loss
    frame: float = 1.0                   # per-frame term inside the depth loss
    stage1: tuple = (1.0, 1.0, 3.0)      # depth / pointmap / camera, stage 1
    lam: float = 1.0                     # geometry weight in the total
    conf: float = 0.1                    # confidence regularizer
    delta: float = 1.0                   # huber corner

    def __post_init__(self):
        vals = (self.tgm, self.frame, self.lam, self.conf) + tuple(self.stage1)
        if any(v < 0 for v in vals):
            raise ad.ContractError("loss weights must be >= 0")
        if self.delta <= 0:
            raise ad.ContractError("huber corner must be positive")


@dataclass(frozen=True)
class LossReport:
    """One training step's named scalars; the text line round-trips through
    parse_line and is what the evaluation plots consume."""

    step: int
    diff: float
    tgm: float
    frame: float
    pmap: float
    cam: float
    geo: float
    total: float

    FIELDS = ("diff", "tgm", "frame", "pmap", "cam", "geo", "total")

    def __post_init__(self):
        for name in self.FIELDS:
            if not np.isfinite(getattr(self, name)):
                raise ad.ContractError("non-finite %s in step %d report"
                                       % (name, self.step))

    def to_line(self):
        parts = ["step=%d" % self.step]
        parts += ["%s=%.9g" % (n, getattr(self, n)) for n in self.FIELDS]
        return " ".join(parts)

    @classmethod
    def parse_line(cls, line):
        kv = dict(tok.split("=", 1) for tok in line.split())
        return cls(step=int(kv["step"]),
                   **{n: float(kv[n]) for n in cls.FIELDS})


# ---------------------------------------------------------------- helpers

def _masked_mean(x, mask):
    """Mean of x over True pixels; (value 0, count 0) when none are."""
    count = int(mask.sum())
    if count == 0:
        return ad.constant(0.0), 0
    w = mask.astype(np.float64) / count
    return (x * ad.constant(w)).sum(), count


# ----------------------------------------------------------------- losses

def diffusion_loss(eps_pred, eps):
    eps = np.asarray(eps)
    if eps_pred.shape != eps.shape:
        raise ad.DimensionError("prediction %s vs noise %s"
                                % (eps_pred.shape, eps.shape))
    d = eps_pred - ad.constant(eps)
    return (d * d).mean()


def huber(residual, delta=1.0):
    if delta <= 0:
        raise ad.ContractError("huber corner must be positive, got %g" % delta)
    return ad.huber_elem(residual, delta).mean()


def camera_loss(pred, gt, delta=1.0):
    """Sum over frames of the mean Huber over the 9 pose numbers, after
    flipping each quaternion to the w >= 0 sheet on both sides (the two
    sheets encode the same rotation)."""
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ad.DimensionError("pose rows %s vs %s" % (pred.shape, gt.shape))
    sp = np.where(pred.value[:, 0] < 0, -1.0, 1.0)
    sg = np.where(gt[:, 0] < 0, -1.0, 1.0)
    quat = pred[:, 0:4] * ad.constant(sp[:, None])
    rest = pred[:, 4:9]
    gt_c = gt.copy()
    gt_c[:, :4] *= sg[:, None]
    d = ad.concat([quat, rest], axis=1) - ad.constant(gt_c)
    return ad.huber_elem(d, delta).sum() / 9.0


def tgm_loss(d_pred, d_gt, valid):
    """Temporal-gradient matching: how well forward depth differences track
    the reference. Blind to any time-constant offset by construction."""
    d_gt = np.asarray(d_gt, dtype=np.float64)
    if d_pred.shape[0] < 2:
        warnings.warn("temporal depth term needs two frames, returning 0")
        return ad.constant(0.0)
    pair = valid[1:] & valid[:-1]
    dp = d_pred[1:] - d_pred[:-1]
    dg = d_gt[1:] - d_gt[:-1]
    out, count = _masked_mean(ad.abs_(dp - ad.constant(dg)), pair)
    if count == 0:
        warnings.warn("no co-valid pixel pairs, temporal depth term is 0")
    return out


def frame_depth_loss(d_pred, d_gt, valid):
    """Per-frame masked mean absolute depth error, averaged over frames that
    have any valid pixels. Deliberately scale-sensitive: no alignment."""
    d_gt = np.asarray(d_gt, dtype=np.float64)
    if d_pred.shape != d_gt.shape:
        raise ad.DimensionError("depth %s vs %s" % (d_pred.shape, d_gt.shape))
    counts = valid.reshape(valid.shape[0], -1).sum(axis=1)
    frames = counts > 0
    if not frames.any():
        warnings.warn("no valid pixels in any frame, depth term is 0")
        return ad.constant(0.0)
    w = np.zeros(valid.shape, dtype=np.float64)
    w[frames] = valid[frames] / counts[frames, None, None]
    w /= frames.sum()
    return (ad.abs_(d_pred - ad.constant(d_gt)) * ad.constant(w)).sum()


def depth_loss(d_pred, d_gt, valid, alpha, beta):
    if alpha < 0 or beta < 0:
        raise ad.ContractError("depth weights must be >= 0")
    out = ad.constant(0.0)
    if alpha > 0:
        out = out + alpha * tgm_loss(d_pred, d_gt, valid)
    if beta > 0:
        out = out + beta * frame_depth_loss(d_pred, d_gt, valid)
    return out


def _norm3(x):
    return ad.l2norm_lastdim(x)


def pmap_loss(p_pred, p_gt, sigma, valid, gamma=0.1):
    """Confidence-carrying point-map loss: each pixel pays its scale times
    the position residual plus its forward-difference residuals, minus
    gamma * log scale. The per-pixel optimum sits at
    scale = gamma / (residual + gradient residual)."""
    p_gt = np.asarray(p_gt, dtype=np.float64)
    if np.any(sigma.value <= 0):
        raise ad.ContractError("point-map scale must be positive everywhere")
    n = int(valid.sum())
    if n == 0:
        warnings.warn("no valid pixels, point-map term is 0")
        return ad.constant(0.0)
    dp = p_pred - ad.constant(p_gt)
    gx = dp[:, :, 1:, :] - dp[:, :, :-1, :]
    gy = dp[:, 1:, :, :] - dp[:, :-1, :, :]
    mx = (valid[:, :, 1:] & valid[:, :, :-1]).astype(np.float64) / n
    my = (valid[:, 1:, :] & valid[:, :-1, :]).astype(np.float64) / n
    m = valid.astype(np.float64) / n
    pos = (sigma * _norm3(dp) - gamma * ad.log(sigma)) * ad.constant(m)
    grad_x = (sigma[:, :, :-1] * _norm3(gx)) * ad.constant(mx)
    grad_y = (sigma[:, :-1, :] * _norm3(gy)) * ad.constant(my)
    return pos.sum() + grad_x.sum() + grad_y.sum()


def geo_loss(depth_l, pmap_l, camera_l, stage, weights=FINAL_GEO):
    if str(stage) == "final":
        a, b, c = FINAL_GEO
    elif str(stage) == "1":
        a, b, c = weights
    else:
        raise ad.ContractError("stage must be 1 or final, got %r" % (stage,))
    return a * depth_l + b * pmap_l + c * camera_l


def total_loss(diff_l, geo_l, lam):
    if lam < 0:
        raise ad.ContractError("geometry weight must be >= 0, got %g" % lam)
    return diff_l + lam * geo_l
