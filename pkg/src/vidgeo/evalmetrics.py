"""Reconstruction metrics and the held-out evaluation driver.

Per clip the sampler regenerates the video from the first frame, the text
tag, and the requested camera trajectory, and the outputs are scored
against the exact labels: PSNR/SSIM on frames, absolute-relative depth
error, geodesic rotation / Euclidean translation pose error, point-map
RMSE, and a multi-view consistency score that reprojects each frame's
point map into other frames' depth maps and counts the fraction of
co-visible samples that agree within 5% relative depth.

run_eval never writes to the checkpoint it reads; gates_zeroed provides
the snapshot-zero-restore used for the coupling ablation.
"""

import contextlib
from dataclasses import dataclass

import numpy as np

from . import cameras
from . import trainer
from .autodiff import ContractError, DimensionError
from .backbone import StateError

CSV_HEADER = "clip,psnr,ssim,depth_absrel,pose_rot_deg,pose_trans,pmap_rmse,mvc"
METRICS = ("psnr", "ssim", "depth_absrel", "pose_rot_deg", "pose_trans",
           "pmap_rmse", "mvc")
MVC_GAPS = (4, 8, 16)
MVC_SAMPLES = 2048
PSNR_CAP = 99.0


def _pair(a, b, what):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError("%s shapes differ: %s vs %s"
                             % (what, a.shape, b.shape))
    return a, b


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for signals in [0, 1], capped at 99
    so identical inputs stay finite."""
    a, b = _pair(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, float(-10.0 * np.log10(mse)))


def _window_sums(x, w):
    c = np.zeros((x.shape[0] + 1, x.shape[1] + 1))
    c[1:, 1:] = x.cumsum(axis=0).cumsum(axis=1)
    return c[w:, w:] - c[:-w, w:] - c[w:, :-w] + c[:-w, :-w]


def ssim(a, b, window=8):
    """Mean local structural similarity over all window x window patches
    (uniform weighting, stride 1, k1=0.01 / k2=0.03, dynamic range 1).
    RGB images are scored on the channel mean."""
    a, b = _pair(a, b, "ssim")
    if a.ndim == 3 and a.shape[-1] == 3:
        a, b = a.mean(axis=-1), b.mean(axis=-1)
    if a.ndim != 2:
        raise DimensionError("ssim wants (H, W) or (H, W, 3), got %s"
                             % (a.shape,))
    H, W = a.shape
    if H < window or W < window:
        raise ContractError("image %dx%d smaller than %dx%d ssim window"
                            % (H, W, window, window))
    n = float(window * window)
    mu_a = _window_sums(a, window) / n
    mu_b = _window_sums(b, window) / n
    # identical inputs must score exactly 1, so the (possibly slightly
    # negative) moment estimates are left unclamped and only the final
    # per-window score is clipped to the metric's range
    var_a = _window_sums(a * a, window) / n - mu_a ** 2
    var_b = _window_sums(b * b, window) / n - mu_b ** 2
    cov = _window_sums(a * b, window) / n - mu_a * mu_b
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2) /
         ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(np.clip(s, -1.0, 1.0).mean())


def depth_absrel(pred, gt, mask):
    """Mean |pred - gt| / gt over the validity mask."""
    pred, gt = _pair(pred, gt, "depth")
    mask = np.asarray(mask) > 0
    if mask.shape != gt.shape:
        raise DimensionError("mask shape %s vs depth %s"
                             % (mask.shape, gt.shape))
    if not mask.any():
        raise ContractError("empty validity mask")
    g = gt[mask]
    if not (g > 0).all():
        raise ContractError("reference depth must be positive where valid")
    return float(np.mean(np.abs(pred[mask] - g) / g))


def _as_pose(p):
    if isinstance(p, cameras.CameraPose9):
        return p
    return cameras.CameraPose9.from_9d(np.asarray(p, dtype=np.float64))


def pose_error(pred, gt):
    """(rotation degrees, translation distance) between two poses, either
    CameraPose9 objects or 9-vectors; insensitive to quaternion sign."""
    pa, pb = _as_pose(pred), _as_pose(gt)
    rot = cameras.pose_rotation_angle_deg(pa.quat, pb.quat)
    return rot, float(np.linalg.norm(pa.trans - pb.trans))


def pmap_rmse(pred, gt, mask):
    """Root-mean-square point-map coordinate error over the validity mask."""
    pred, gt = _pair(pred, gt, "point map")
    mask = np.asarray(mask) > 0
    if not mask.any():
        raise ContractError("empty validity mask")
    d = pred[mask] - gt[mask]
    return float(np.sqrt(np.mean(d * d)))


def multiview_consistency(points, depth, poses, masks=None, gaps=MVC_GAPS,
                          samples=MVC_SAMPLES, seed=0, rel=0.05):
    """Fraction of co-visible point samples whose reprojected depth agrees
    with the target frame's depth map within `rel`.

    For every frame pair with gap in `gaps`, `samples` seeded pixels of the
    earlier frame's point map are projected into the later frame (point
    maps live in the first pose's camera frame) and compared against a
    bilinear read of its depth map.  Samples are dropped — not failed —
    when they leave the image, touch an invalid or discontinuous
    (>10% relative spread) 2x2 neighborhood, or land behind the visible
    surface (>5% beyond it, i.e. occluded).  Returns the mean per-pair
    fraction, or None when no pair has a co-visible sample.
    """
    P = np.asarray(points, dtype=np.float64)
    D = np.asarray(depth, dtype=np.float64)
    if D.ndim != 3 or P.shape != D.shape + (3,):
        raise DimensionError("points %s do not match depth %s"
                             % (P.shape, D.shape))
    T, H, W = D.shape
    poses = [_as_pose(p) for p in poses]
    if len(poses) != T:
        raise DimensionError("got %d poses for %d frames" % (len(poses), T))
    if masks is None:
        masks = np.ones((T, H, W), dtype=bool)
    else:
        masks = np.asarray(masks) > 0
        if masks.shape != D.shape:
            raise DimensionError("mask shape %s vs depth %s"
                                 % (masks.shape, D.shape))
    if T < 2:
        return None
    ref = poses[0]
    scores = []
    for gap in gaps:
        for j in range(T - gap):
            k = j + gap
            src = np.argwhere(masks[j])
            if src.shape[0] == 0:
                continue
            rng = np.random.default_rng(np.random.SeedSequence([seed, j, k]))
            pick = src[rng.integers(0, src.shape[0], size=samples)]
            pts = P[j, pick[:, 0], pick[:, 1]]
            pix, z, ok = cameras.project_points(pts, poses[k], H, W, ref=ref)
            # pixel (i, j) is centered at (j + 0.5, i + 0.5)
            x, y = pix[:, 0] - 0.5, pix[:, 1] - 0.5
            x0 = np.floor(x).astype(np.int64)
            y0 = np.floor(y).astype(np.int64)
            ok &= (x0 >= 0) & (x0 < W - 1) & (y0 >= 0) & (y0 < H - 1)
            x0, y0 = np.clip(x0, 0, W - 2), np.clip(y0, 0, H - 2)
            mk, dk = masks[k], D[k]
            ok &= (mk[y0, x0] & mk[y0, x0 + 1]
                   & mk[y0 + 1, x0] & mk[y0 + 1, x0 + 1])
            quad = np.stack([dk[y0, x0], dk[y0, x0 + 1],
                             dk[y0 + 1, x0], dk[y0 + 1, x0 + 1]])
            dmin, dmax = quad.min(axis=0), quad.max(axis=0)
            ok &= (dmin > 0) & (dmax - dmin <= 0.1 * dmin)
            fx, fy = x - x0, y - y0
            d_near = (quad[0] * (1 - fx) * (1 - fy) + quad[1] * fx * (1 - fy)
                      + quad[2] * (1 - fx) * fy + quad[3] * fx * fy)
            covis = ok & (z <= 1.05 * d_near)
            n_covis = int(covis.sum())
            if n_covis == 0:
                continue
            good = covis & (np.abs(z - d_near) <= rel * d_near)
            scores.append(int(good.sum()) / n_covis)
    if not scores:
        return None
    return float(np.mean(scores))


def clip_outputs(clip):
    """Repackage a clip's own labels in the sampler's output shape, for
    metric self-calibration (scoring ground truth against itself)."""
    return {"frames": clip.frames.astype(np.float64),
            "depth": clip.depth.astype(np.float64),
            "points": clip.points.astype(np.float64),
            "poses": clip.poses.astype(np.float64)}


def clip_metrics(out, clip, seed=0):
    """Score one set of sampler outputs against a clip's labels."""
    mask = clip.valid > 0
    rows_p = np.asarray(out["poses"], dtype=np.float64)
    rows_g = clip.poses.astype(np.float64)
    errs = [pose_error(p, g) for p, g in zip(rows_p, rows_g)]
    return {
        "psnr": psnr(out["frames"], clip.frames),
        "ssim": float(np.mean([ssim(fp, fg) for fp, fg
                               in zip(out["frames"], clip.frames)])),
        "depth_absrel": depth_absrel(out["depth"], clip.depth, mask),
        "pose_rot_deg": float(np.mean([e[0] for e in errs])),
        "pose_trans": float(np.mean([e[1] for e in errs])),
        "pmap_rmse": pmap_rmse(out["points"], clip.points, mask),
        "mvc": multiview_consistency(out["points"], out["depth"],
                                     rows_p, masks=mask, seed=seed),
    }


@dataclass(frozen=True)
class EvalReport:
    """Per-clip metric rows plus their aggregate (means; mvc averages the
    clips where it is defined)."""
    rows: tuple
    aggregate: dict

    def csv_text(self):
        def fmt(v):
            return "" if v is None else "%.9g" % v
        lines = [CSV_HEADER]
        for row in self.rows:
            lines.append(",".join([row["clip"]]
                                  + [fmt(row[m]) for m in METRICS]))
        lines.append(",".join(["aggregate"]
                              + [fmt(self.aggregate[m]) for m in METRICS]))
        return "\n".join(lines) + "\n"


def _aggregate_rows(rows):
    agg = {}
    for m in METRICS:
        vals = [row[m] for row in rows if row[m] is not None]
        agg[m] = float(np.mean(vals)) if vals else None
        if m != "mvc":
            if len(vals) != len(rows):
                raise StateError("metric %s missing for some clip" % m)
            if not np.isfinite(agg[m]):
                raise StateError("aggregate %s is not finite" % m)
    return agg


@contextlib.contextmanager
def gates_zeroed(bag):
    """Pin every cross-attention gate to zero for the duration of the
    context, restoring the exact prior state (checksum-verified) on exit."""
    names = [n for n in bag.names("xattn.")
             if n.rsplit(".", 1)[-1] in ("gamma_v", "gamma_g")]
    if not names:
        raise StateError("no cross-attention gates to zero")
    want = bag.checksum()
    snap = {n: np.array(bag[n].value, copy=True) for n in names}
    for n in names:
        bag[n].value[...] = 0.0
    try:
        yield bag
    finally:
        for n in names:
            bag[n].value[...] = snap[n]
        if bag.checksum() != want:
            raise StateError("gate restore changed parameters")


def run_eval(ckpt_path, clips, csv_path=None, names=None, seed=0,
             zero_gates=False):
    """Evaluate a checkpoint over held-out clips.

    Each clip is regenerated from its first frame, text tag, and pose
    track, scored with clip_metrics, and written as one CSV row, followed
    by an `aggregate` row of means.  Deterministic in (checkpoint, clips,
    seed); reads but never writes the checkpoint.
    """
    clips = list(clips)
    if not clips:
        raise ContractError("empty evaluation split")
    if names is None:
        names = ["clip_%05d" % i for i in range(len(clips))]
    ck = trainer.load_checkpoint(ckpt_path)
    bag, cfg, dcfg = ck["bag"], ck["cfg"], ck["dcfg"]
    ctx = gates_zeroed(bag) if zero_gates else contextlib.nullcontext()
    rows = []
    with ctx:
        for i, clip in enumerate(clips):
            out = trainer.infer(bag, cfg, dcfg,
                                clip.frames[0].astype(np.float64), clip.text,
                                clip.poses.astype(np.float64),
                                seed=np.random.SeedSequence([seed, i]))
            rows.append(dict(clip_metrics(out, clip, seed=seed),
                             clip=names[i]))
    report = EvalReport(tuple(rows), _aggregate_rows(rows))
    if csv_path is not None:
        with open(csv_path, "w") as fh:
            fh.write(report.csv_text())
    return report
