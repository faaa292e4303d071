"""Video trunk: latent-shape laws, fixed position/conditioning codes, the
noise schedule and deterministic sampler, patch tokenizer roundtrip, block
identity-at-init, a hand-computed single-token oracle, gradients, and the
front-group/full-pass composition law."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import erf

from vidgeo import autodiff as ad
from vidgeo import backbone as bb
from vidgeo import nnops
from vidgeo.params import ParamBag

TOL = 1e-4


def tiny_cfg(**kw):
    base = dict(blocks=3, pcb=1, width=12, heads=2, mlp_ratio=2,
                cam_blocks=2, cond_dim=6, cam_feat=4, geo_width=12,
                registers=2, bridge_blocks=1)
    base.update(kw)
    return bb.BackboneConfig(**base)


# ----------------------------------------------------------- shape laws

def test_latent_shape_examples():
    assert bb.latent_shape(81, 336, 592) == (21, 21, 37)
    assert bb.latent_shape(21, 48, 80) == (6, 3, 5)
    assert bb.latent_shape(1, 16, 16) == (1, 1, 1)


def test_latent_shape_errors_name_the_extent():
    with pytest.raises(ad.ContractError, match="frame count"):
        bb.latent_shape(22, 48, 80)
    with pytest.raises(ad.ContractError, match="frame count"):
        bb.latent_shape(0, 48, 80)
    with pytest.raises(ad.ContractError, match="height"):
        bb.latent_shape(21, 40, 80)
    with pytest.raises(ad.ContractError, match="width"):
        bb.latent_shape(21, 48, 81)


def test_config_validation():
    with pytest.raises(ad.ContractError):
        tiny_cfg(pcb=3)                      # front group must stay below depth
    with pytest.raises(ad.ContractError):
        tiny_cfg(width=13)                   # not divisible by heads
    with pytest.raises(ad.ContractError):
        tiny_cfg(cam_blocks=9)
    assert tiny_cfg().n_irg == 2


# ------------------------------------------------------------ fixed codes

def test_sinusoid_values_and_shape():
    out = bb.sinusoid(np.arange(3), 8)
    assert out.shape == (3, 8)
    assert np.all(np.abs(out) <= 1.0)
    assert_allclose(out[:, 0], np.sin(np.arange(3)))       # unit frequency
    assert_allclose(out[:, 1], np.cos(np.arange(3)))
    assert bb.sinusoid(2.5, 6).shape == (6,)


def test_pos_grid_axes_and_cache():
    g = bb.pos_grid(2, 3, 4, 12)
    assert g.shape == (2, 3, 4, 12)
    # each third of the channels varies along exactly one grid axis
    assert_array_equal(g[:, 0, :, :4], g[:, 1, :, :4])
    assert_array_equal(g[:, :, 0, :4], g[:, :, 1, :4])
    assert not np.array_equal(g[0, 0, 0, :4], g[1, 0, 0, :4])
    assert_array_equal(g[0, :, :, 4:8], g[1, :, :, 4:8])
    assert_array_equal(g[:, :, 0, 4:8], g[:, :, 1, 4:8])
    assert not np.array_equal(g[0, 0, 0, 4:8], g[0, 1, 0, 4:8])
    assert_array_equal(g[0, :, :, 8:], g[1, :, :, 8:])
    assert_array_equal(g[:, 0, :, 8:], g[:, 1, :, 8:])
    assert not np.array_equal(g[0, 0, 0, 8:], g[0, 0, 1, 8:])
    assert bb.pos_grid(2, 3, 4, 12) is g
    assert not g.flags.writeable


def test_text_embed_deterministic_unit_scale():
    a = bb.text_embed("orbit 25.0 prims=3 seed=7.2", 64)
    b = bb.text_embed("orbit 25.0 prims=3 seed=7.2", 64)
    c = bb.text_embed("pan 2.0 prims=1 seed=0.1", 64)
    assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert 0.3 < np.linalg.norm(a) < 3.0


def test_image_stub_pools_and_guards():
    frame = np.full((8, 8, 3), 0.25)
    assert_allclose(bb.image_stub(frame), np.full(48, 0.25))
    frame2 = frame.copy()
    frame2[:2] = 1.0                        # top band only moves top cells
    stub = bb.image_stub(frame2).reshape(4, 4, 3)
    assert np.all(stub[0] > 0.25) and np.all(stub[1:] == 0.25)
    with pytest.raises(ad.ContractError):
        bb.image_stub(np.zeros((9, 8, 3)))


# --------------------------------------------------------- noise schedule

def test_alpha_bar_examples_and_domain():
    sch = bb.NoiseSchedule(1000)
    assert_allclose(sch.alpha_bar(1), 1.0 - 1.0 / 1001.0)
    assert_allclose(sch.alpha_bar(1000), 1.0 / 1001.0)
    abs_ = [sch.alpha_bar(t) for t in range(1, 1001)]
    assert np.all(np.diff(abs_) < 0)
    for bad in (0, 1001):
        with pytest.raises(ad.ContractError):
            sch.alpha_bar(bad)


def test_mix_examples_and_shape_guard():
    sch = bb.NoiseSchedule(1000)
    z0 = np.array([2.0, -1.0])
    eps = np.array([1.0, 1.0])
    assert_array_equal(sch.mix(z0, eps, 1.0), z0)
    assert_array_equal(sch.mix(z0, eps, 0.0), eps)
    assert_allclose(sch.mix(z0, eps, 0.25), 0.5 * z0 + np.sqrt(0.75) * eps)
    with pytest.raises(ad.DimensionError):
        sch.add_noise(z0, 5, np.ones(3))


def test_mix_preserves_unit_variance():
    rng = np.random.default_rng(0)
    z0 = rng.standard_normal(1_000_000)
    eps = rng.standard_normal(1_000_000)
    mixed = bb.NoiseSchedule(1000).mix(z0, eps, 0.3)
    assert abs(mixed.var() - 1.0) < 0.01


def test_sample_times_coarse_stride():
    sch = bb.NoiseSchedule(1000)
    ts = sch.sample_times(50)
    assert ts[0] == 1000 and ts[-1] == 1 and len(ts) == 50
    assert np.all(np.diff(ts) < 0)
    assert_array_equal(bb.NoiseSchedule(10).sample_times(100),
                       np.arange(10, 0, -1))


def test_ddim_sampler_deterministic():
    sch = bb.NoiseSchedule(100)
    eps_fn = lambda x, t: 0.1 * x
    a = bb.ddim_sample(sch, (4, 3), eps_fn, np.random.default_rng(7), 20)
    b = bb.ddim_sample(sch, (4, 3), eps_fn, np.random.default_rng(7), 20)
    assert a.shape == (4, 3)
    assert_array_equal(a, b)
    c = bb.ddim_sample(sch, (4, 3), eps_fn, np.random.default_rng(8), 20)
    assert not np.array_equal(a, c)


# -------------------------------------------------------- patch tokenizer

def test_patch_roundtrip_exact_with_orthonormal_embedding():
    # widths chosen so the grouped-frame projection is a permutation-free
    # identity: every pixel survives into the token exactly once.
    pd, c = bb.PATCH * bb.PATCH * 3, bb.TGROUP * bb.PATCH * bb.PATCH * 3
    bag = ParamBag()
    bag.add("backbone.patch.w0", np.eye(pd, c), trainable=False)
    bag.add("backbone.patch.w1", np.eye(c), trainable=False)
    rng = np.random.default_rng(3)
    frames = rng.standard_normal((5, 32, 32, 3))
    z = bb.patchify(bag, frames)
    assert z.shape == (2, 2, 2, c)
    back = bb.unpatchify(bag, z, 5, 32, 32,
                         inverses=(np.eye(c, pd), np.eye(c)))
    assert_array_equal(back, frames)


def test_patchify_default_projection_shapes():
    cfg = tiny_cfg()
    bag = ParamBag()
    bb.build_backbone(bag, cfg, np.random.default_rng(0))
    frames = np.random.default_rng(1).standard_normal((9, 32, 48, 3))
    z = bb.patchify(bag, frames)
    assert z.shape == (3, 2, 3, cfg.width)
    back = bb.unpatchify(bag, z, 9, 32, 48)
    assert back.shape == (9, 32, 48, 3)


# ----------------------------------------------------------------- blocks

def block_arrays(rng, c, m, ada):
    return [np.ones(c) + 0.1 * rng.standard_normal(c), 0.1 * rng.standard_normal(c),
            np.ones(c) + 0.1 * rng.standard_normal(c), 0.1 * rng.standard_normal(c),
            rng.standard_normal((c, c)) / np.sqrt(c),
            rng.standard_normal((c, c)) / np.sqrt(c),
            rng.standard_normal((c, c)) / np.sqrt(c),
            rng.standard_normal((c, c)) / np.sqrt(c),
            rng.standard_normal((c, m)) / np.sqrt(c), 0.1 * rng.standard_normal(m),
            rng.standard_normal((m, c)) / np.sqrt(m), 0.1 * rng.standard_normal(c),
            0.3 * rng.standard_normal((ada, 4 * c)), 0.1 * rng.standard_normal(4 * c)]


BLOCK_NAMES = ["ln1_g", "ln1_b", "ln2_g", "ln2_b", "wq", "wk", "wv", "wo",
               "w1", "b1", "w2", "b2", "ada_w", "ada_b"]


def test_block_is_identity_at_build():
    bag = ParamBag()
    bb.add_block_params(bag, "t.", 12, 2, np.random.default_rng(0),
                        zero_out=True, ada_dim=6)
    x = ad.constant(np.random.default_rng(1).standard_normal((7, 12)))
    cond = ad.constant(np.random.default_rng(2).standard_normal(6))
    out = bb.block_forward(bag, "t.", x, 2, cond)
    assert_array_equal(out.value, x.value)


def test_block_width_guard():
    bag = ParamBag()
    bb.add_block_params(bag, "t.", 12, 2, np.random.default_rng(0),
                        zero_out=True)
    with pytest.raises(ad.DimensionError):
        bb.block_forward(bag, "t.", ad.constant(np.zeros((4, 8))), 2)


def manual_ln(v, g, b):
    mu = v.mean(axis=-1, keepdims=True)
    var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
    return (v - mu) / np.sqrt(var + 1e-5) * g + b


def test_block_single_token_matches_hand_math():
    c, ada = 8, 4
    rng = np.random.default_rng(5)
    arrs = block_arrays(rng, c, 2 * c, ada)
    bag = {"t." + n: ad.constant(a) for n, a in zip(BLOCK_NAMES, arrs)}
    x = rng.standard_normal((1, c))
    cond = rng.standard_normal(ada)
    out = bb.block_forward(bag, "t.", ad.constant(x), 2, ad.constant(cond))

    d = dict(zip(BLOCK_NAMES, arrs))
    mod = cond @ d["ada_w"] + d["ada_b"]
    sh1, sc1, sh2, sc2 = mod.reshape(4, c)
    h = manual_ln(x, d["ln1_g"], d["ln1_b"]) * (1 + sc1) + sh1
    x2 = x + h @ d["wv"] @ d["wo"]          # one token: attention is V·O
    h2 = manual_ln(x2, d["ln2_g"], d["ln2_b"]) * (1 + sc2) + sh2
    pre = h2 @ d["w1"] + d["b1"]
    act = 0.5 * pre * (1 + erf(pre / np.sqrt(2)))
    want = x2 + act @ d["w2"] + d["b2"]
    assert_allclose(out.value, want, atol=1e-12)


def test_block_gradcheck():
    c, ada = 8, 4
    rng = np.random.default_rng(11)
    arrs = block_arrays(rng, c, 2 * c, ada)
    arrs += [rng.standard_normal((5, c)), rng.standard_normal(ada)]

    def build(*lv):
        bag = dict(zip(["t." + n for n in BLOCK_NAMES], lv[:-2]))
        return bb.block_forward(bag, "t.", lv[-2], 2, lv[-1]).sum()

    assert ad.check_grad(build, arrs, coords=40) < TOL


# ------------------------------------------------- trunk-level invariants

def test_run_backbone_predicts_zero_noise_at_build():
    cfg = tiny_cfg()
    bag = ParamBag()
    bb.build_backbone(bag, cfg, np.random.default_rng(0))
    z = np.random.default_rng(1).standard_normal((2, 2, 3, cfg.width))
    cond = bb.conditioning(bag, cfg, "orbit", np.zeros((8, 8, 3)), 500)
    eps = bb.run_backbone(bag, cfg, z, cond)
    assert eps.value.shape == (2, 2, 3, cfg.width)
    assert_array_equal(eps.value, np.zeros_like(z))


def test_front_back_split_composes_bitwise():
    cfg = tiny_cfg()
    bag = ParamBag()
    rng = np.random.default_rng(0)
    bb.build_backbone(bag, cfg, rng)
    bag.randomize("backbone.", rng, scale=0.2)
    z = rng.standard_normal((2, 2, 3, cfg.width))
    cond = bb.conditioning(bag, cfg, "pan", np.zeros((8, 8, 3)), 17)
    n = 2 * 2 * 3
    betas = {1: ad.constant(0.1 * rng.standard_normal((n, cfg.width))),
             2: ad.constant(0.1 * rng.standard_normal((n, cfg.width)))}
    x, grid = bb.tokens_from_latent(z)
    full = bb.run_blocks(bag, cfg, x, grid, cond, betas, 1, cfg.blocks)
    x2, _ = bb.tokens_from_latent(z)
    front = bb.run_blocks(bag, cfg, x2, grid, cond, betas, 1, cfg.pcb)
    back = bb.run_blocks(bag, cfg, front, grid, cond, betas,
                         cfg.pcb + 1, cfg.blocks)
    assert_array_equal(back.value, full.value)


def test_precondition_identity_when_front_group_empty():
    cfg = tiny_cfg(pcb=0)
    bag = ParamBag()
    bb.build_backbone(bag, cfg, np.random.default_rng(0))
    bag.set_trainable(["backbone."], False)
    z = np.random.default_rng(1).standard_normal((2, 2, 3, cfg.width))
    cond = bb.conditioning(bag, cfg, "dolly", np.zeros((8, 8, 3)), 3)
    toks, grid = bb.precondition(bag, cfg, z, cond, require_frozen=True)
    assert grid == (2, 2, 3)
    assert_array_equal(toks.value, z.reshape(-1, cfg.width))


def test_precondition_requires_frozen_trunk():
    cfg = tiny_cfg()
    bag = ParamBag()
    bb.build_backbone(bag, cfg, np.random.default_rng(0))
    z = np.zeros((2, 2, 3, cfg.width))
    cond = bb.conditioning(bag, cfg, "orbit", np.zeros((8, 8, 3)), 3)
    with pytest.raises(bb.StateError, match="backbone\\."):
        bb.precondition(bag, cfg, z, cond, require_frozen=True)
    bag.set_trainable(["backbone."], False)
    a, _ = bb.precondition(bag, cfg, z, cond, require_frozen=True)
    b, _ = bb.precondition(bag, cfg, z, cond, require_frozen=True)
    assert_array_equal(a.value, b.value)


def test_conditioning_deterministic_and_text_sensitive():
    cfg = tiny_cfg()
    bag = ParamBag()
    bb.build_backbone(bag, cfg, np.random.default_rng(0))
    frame = np.random.default_rng(1).random((8, 8, 3))
    a = bb.conditioning(bag, cfg, "orbit 25", frame, 10)
    b = bb.conditioning(bag, cfg, "orbit 25", frame, 10)
    c = bb.conditioning(bag, cfg, "pan 3", frame, 10)
    d = bb.conditioning(bag, cfg, "orbit 25", frame, 11)
    assert a.value.shape == (cfg.cond_dim,)
    assert_array_equal(a.value, b.value)
    assert not np.array_equal(a.value, c.value)
    assert not np.array_equal(a.value, d.value)
