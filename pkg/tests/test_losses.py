"""Loss analytics: every closed-form example, the shift-blindness split
between the temporal and per-frame depth terms, the confidence optimum of
the point-map loss (golden-section oracle), aggregate arithmetic and
linearity, and finite-difference gradchecks for each term."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from vidgeo import autodiff as ad
from vidgeo import losses as L

TOL = 1e-4


def golden_min(f, lo, hi, iters=120):
    g = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


# -------------------------------------------------------------- diffusion

def test_diffusion_examples_and_analytic_gradient():
    eps = np.random.default_rng(0).standard_normal((2, 3, 4))
    assert float(L.diffusion_loss(ad.constant(eps), eps).value) == 0.0
    ones = np.ones((2, 3))
    assert_allclose(float(L.diffusion_loss(ad.constant(0.0 * ones), ones).value), 1.0)
    pred = ad.leaf(np.random.default_rng(1).standard_normal((2, 3, 4)))
    with ad.Graph():
        ad.backward(L.diffusion_loss(pred, eps))
    assert_allclose(pred.grad, 2.0 * (pred.value - eps) / eps.size,
                    atol=1e-15)
    with pytest.raises(ad.DimensionError):
        L.diffusion_loss(ad.constant(np.zeros((2, 2))), np.zeros((2, 3)))
    assert ad.check_grad(lambda p: L.diffusion_loss(p, eps),
                         [pred.value]) < TOL


def test_huber_examples_and_gradcheck():
    assert float(L.huber(ad.constant(0.0)).value) == 0.0
    assert_allclose(float(L.huber(ad.constant(0.5), 1.0).value), 0.125)
    assert_allclose(float(L.huber(ad.constant(2.0), 1.0).value), 1.5)
    with pytest.raises(ad.ContractError):
        L.huber(ad.constant(1.0), 0.0)
    r = np.array([-2.5, -0.4, 0.2, 0.7, 3.0])   # both branches, off the kink
    assert ad.check_grad(lambda v: L.huber(v, 1.0), [r]) < TOL


# ----------------------------------------------------------------- camera

def pose_rows(T, seed=0):
    rng = np.random.default_rng(seed)
    rows = np.zeros((T, 9))
    rows[:, 0] = 0.9
    rows[:, 1:4] = 0.2 * rng.standard_normal((T, 3))
    rows[:, :4] /= np.linalg.norm(rows[:, :4], axis=1, keepdims=True)
    rows[:, 4:7] = rng.standard_normal((T, 3))
    rows[:, 7:9] = [1.2, 0.8]
    return rows


def test_camera_loss_examples():
    gt = pose_rows(3)
    assert float(L.camera_loss(ad.constant(gt), gt).value) == 0.0
    flipped = gt.copy()
    flipped[1, :4] *= -1.0                     # same rotation, other sheet
    assert_allclose(float(L.camera_loss(ad.constant(flipped), gt).value),
                    0.0, atol=1e-15)
    gt1 = pose_rows(1)
    pred = gt1.copy()
    pred[0, 4] += 1.0
    assert_allclose(float(L.camera_loss(ad.constant(pred), gt1).value),
                    0.5 / 9.0)
    with pytest.raises(ad.DimensionError):
        L.camera_loss(ad.constant(gt), pose_rows(2))


def test_camera_loss_gradcheck():
    gt = pose_rows(3, seed=2)
    pred = gt + 0.25 * np.random.default_rng(3).standard_normal(gt.shape)
    assert ad.check_grad(lambda p: L.camera_loss(p, gt), [pred]) < TOL


# ------------------------------------------------------------------ depth

def depth_data(T=4, H=5, W=6, seed=0):
    rng = np.random.default_rng(seed)
    gt = 1.0 + rng.random((T, H, W))
    valid = rng.random((T, H, W)) > 0.2
    return gt, valid


def test_tgm_examples_and_masking_oracle():
    gt, valid = depth_data()
    assert float(L.tgm_loss(ad.constant(gt), gt, valid).value) == 0.0
    assert_allclose(float(L.tgm_loss(ad.constant(gt + 0.7), gt, valid).value),
                    0.0, atol=1e-12)
    drift = gt + 0.3 * np.arange(4)[:, None, None]
    assert_allclose(float(L.tgm_loss(ad.constant(drift), gt, valid).value),
                    0.3, atol=1e-12)
    with pytest.warns(UserWarning):
        out = L.tgm_loss(ad.constant(gt[:1]), gt[:1], valid[:1])
    assert float(out.value) == 0.0

    pred = gt + 0.1 * np.random.default_rng(1).standard_normal(gt.shape)
    got = float(L.tgm_loss(ad.constant(pred), gt, valid).value)
    pair = valid[1:] & valid[:-1]
    want = np.abs((pred[1:] - pred[:-1]) - (gt[1:] - gt[:-1]))[pair].mean()
    assert_allclose(got, want, atol=1e-12)
    assert ad.check_grad(lambda p: L.tgm_loss(p, gt, valid), [pred],
                         coords=20) < TOL


def test_frame_depth_examples_and_per_frame_average():
    gt, valid = depth_data(seed=4)
    assert float(L.frame_depth_loss(ad.constant(gt), gt, valid).value) == 0.0
    assert_allclose(
        float(L.frame_depth_loss(ad.constant(gt + 0.4), gt, valid).value),
        0.4, atol=1e-12)
    with pytest.warns(UserWarning):
        out = L.frame_depth_loss(ad.constant(gt), gt, np.zeros_like(valid))
    assert float(out.value) == 0.0

    sparse = valid.copy()
    sparse[2] = False                           # one empty frame is skipped
    pred = gt + 0.1 * np.random.default_rng(5).standard_normal(gt.shape)
    got = float(L.frame_depth_loss(ad.constant(pred), gt, sparse).value)
    per = [np.abs(pred[f] - gt[f])[sparse[f]].mean()
           for f in range(4) if sparse[f].any()]
    assert_allclose(got, np.mean(per), atol=1e-12)
    assert ad.check_grad(lambda p: L.frame_depth_loss(p, gt, valid), [pred],
                         coords=20) < TOL


def test_tgm_blind_where_frame_loss_sees():
    gt, valid = depth_data(seed=6)
    pred = gt + 0.05 * np.random.default_rng(7).standard_normal(gt.shape)
    offset = 0.8 * np.random.default_rng(8).random(gt.shape[1:])
    base_tgm = float(L.tgm_loss(ad.constant(pred), gt, valid).value)
    base_frame = float(L.frame_depth_loss(ad.constant(pred), gt, valid).value)
    shifted = pred + offset[None]
    assert_allclose(float(L.tgm_loss(ad.constant(shifted), gt, valid).value),
                    base_tgm, atol=1e-12)
    assert abs(float(L.frame_depth_loss(ad.constant(shifted), gt,
                                        valid).value) - base_frame) > 1e-3


def test_depth_loss_compositions():
    gt, valid = depth_data(seed=9)
    off = ad.constant(gt + 0.6)
    assert float(L.depth_loss(off, gt, valid, 0.0, 0.0).value) == 0.0
    assert_allclose(float(L.depth_loss(off, gt, valid, 1.0, 0.0).value),
                    0.0, atol=1e-12)
    assert_allclose(float(L.depth_loss(off, gt, valid, 0.0, 1.0).value),
                    0.6, atol=1e-12)
    with pytest.raises(ad.ContractError):
        L.depth_loss(off, gt, valid, -1.0, 0.0)


# -------------------------------------------------------------- point map

def test_pmap_zero_residual_unit_scale_is_zero():
    gt = np.random.default_rng(0).standard_normal((2, 3, 4, 3))
    valid = np.ones((2, 3, 4), dtype=bool)
    sigma = ad.constant(np.ones((2, 3, 4)))
    out = L.pmap_loss(ad.constant(gt), gt, sigma, valid, gamma=0.1)
    assert float(out.value) == 0.0


def test_pmap_scale_optimum_at_half_for_unit_gamma_residual_two():
    gt = np.zeros((1, 4, 4, 3))
    pred = gt.copy()
    pred[..., 0] = 2.0                          # constant: no gradient term
    valid = np.ones((1, 4, 4), dtype=bool)

    def f(s):
        sig = ad.constant(np.full((1, 4, 4), s))
        return float(L.pmap_loss(ad.constant(pred), gt, sig, valid,
                                 gamma=1.0).value)

    s_star = golden_min(f, 1e-3, 5.0)
    assert_allclose(s_star, 0.5, atol=1e-6)
    assert f(0.5) < f(0.4) and f(0.5) < f(0.6)


def test_pmap_negative_via_log_term_and_domain_guard():
    gt = np.random.default_rng(1).standard_normal((2, 3, 4, 3))
    valid = np.ones((2, 3, 4), dtype=bool)
    out = L.pmap_loss(ad.constant(gt), gt,
                      ad.constant(np.full((2, 3, 4), np.e)), valid, gamma=0.7)
    assert_allclose(float(out.value), -0.7, atol=1e-12)
    with pytest.raises(ad.ContractError):
        L.pmap_loss(ad.constant(gt), gt,
                    ad.constant(np.zeros((2, 3, 4))), valid)


def test_pmap_per_pixel_optimum_matches_golden_section():
    rng = np.random.default_rng(2)
    gt = rng.standard_normal((2, 5, 6, 3))
    pred = gt + 0.8 * rng.standard_normal(gt.shape)
    valid = np.ones((2, 5, 6), dtype=bool)
    sigma0 = 0.5 + rng.random((2, 5, 6))
    gamma = 0.7
    for (t0, y0, x0) in [(0, 2, 2), (1, 1, 3), (1, 3, 1)]:
        dp = pred - gt
        r = np.linalg.norm(dp[t0, y0, x0])
        rg = (np.linalg.norm((dp[t0, y0, x0 + 1] - dp[t0, y0, x0]))
              + np.linalg.norm((dp[t0, y0 + 1, x0] - dp[t0, y0, x0])))

        def f(s):
            sig = sigma0.copy()
            sig[t0, y0, x0] = s
            return float(L.pmap_loss(ad.constant(pred), gt,
                                     ad.constant(sig), valid,
                                     gamma=gamma).value)

        s_star = golden_min(f, 1e-4, 20.0)
        assert_allclose(s_star, gamma / (r + rg), rtol=1e-6)


def test_pmap_gradcheck_through_points_and_scale():
    rng = np.random.default_rng(3)
    gt = rng.standard_normal((2, 3, 4, 3))
    pred = gt + 0.5 * rng.standard_normal(gt.shape)
    sigma = 0.5 + rng.random((2, 3, 4))
    valid = rng.random((2, 3, 4)) > 0.2

    def build(p, s):
        return L.pmap_loss(p, gt, s, valid, gamma=0.3)

    assert ad.check_grad(build, [pred, sigma], coords=20) < TOL


# -------------------------------------------------------------- aggregates

def test_geo_and_total_arithmetic():
    one = ad.constant(1.0)
    zero = ad.constant(0.0)
    assert_allclose(float(L.geo_loss(one, one, one, "final").value), 5.0)
    assert float(L.geo_loss(zero, zero, zero, "final").value) == 0.0
    s1 = L.geo_loss(one, one, one, 1, weights=(1.0, 1.0, 3.0))
    assert_allclose(float(s1.value),
                    float(L.geo_loss(one, one, one, "final").value))
    with pytest.raises(ad.ContractError):
        L.geo_loss(one, one, one, 2)
    diff, geo = ad.constant(0.5), ad.constant(0.25)
    assert_allclose(float(L.total_loss(diff, geo, 1.0).value), 0.75)
    assert float(L.total_loss(diff, geo, 0.0).value) == 0.5
    with pytest.raises(ad.ContractError):
        L.total_loss(diff, geo, -0.1)
    total = float(L.total_loss(diff, geo, 1.7).value)
    assert abs(total - (0.5 + 1.7 * 0.25)) < 1e-12


def test_total_gradient_is_weighted_sum_of_term_gradients():
    x0 = np.random.default_rng(4).standard_normal(5)
    lam = 0.7

    def diff_of(x):
        return (x * x).mean()

    def geo_of(x):
        return (x * ad.constant(np.arange(5.0))).sum()

    x = ad.leaf(x0.copy())
    with ad.Graph():
        ad.backward(L.total_loss(diff_of(x), geo_of(x), lam))
    g_total = x.grad.copy()

    xa = ad.leaf(x0.copy())
    with ad.Graph():
        ad.backward(diff_of(xa))
    xb = ad.leaf(x0.copy())
    with ad.Graph():
        ad.backward(geo_of(xb))
    assert_allclose(g_total, xa.grad + lam * xb.grad, atol=1e-12)


def test_loss_report_line_roundtrip_and_guards():
    rep = L.LossReport(step=3, diff=0.5, tgm=0.001234567, frame=1.5,
                       pmap=-0.25, cam=2.0 / 3.0, geo=1.25, total=1.75)
    line = rep.to_line()
    assert line.startswith("step=3 diff=0.5 tgm=")
    back = L.LossReport.parse_line(line)
    assert back.step == 3
    for name in L.LossReport.FIELDS:
        assert_allclose(getattr(back, name), getattr(rep, name), rtol=1e-8)
    with pytest.raises(ad.ContractError):
        L.LossReport(step=0, diff=np.nan, tgm=0, frame=0, pmap=0, cam=0,
                     geo=0, total=0)
    with pytest.raises(ad.ContractError):
        L.LossWeights(lam=-1.0)
    with pytest.raises(ad.ContractError):
        L.LossWeights(delta=0.0)
