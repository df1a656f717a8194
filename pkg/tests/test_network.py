import numpy as np
import pytest

from amdc import data as D
from amdc import network as N
from amdc import optics as O
from amdc import tensor as T
from amdc.errors import ContractError, ShapeError


def _setup(n_stages=1, hw=8, channels=4, window=4, d=1, seed=0):
    cfg = N.ModelConfig(n_stages=n_stages, channels=channels, window=window, d=d)
    weights = N.init_model_weights(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    cube = O.HsiCube(rng.random((hw, hw, channels)),
                     D.default_wavelengths(channels))
    op = O.SensingOperator(rng.random((hw, hw)), O.DispersionSpec(d),
                           D.default_response(cube.wavelengths_nm))
    pair = O.simulate_pair(cube, op)
    return cfg, weights, cube, op, pair


# ----------------------------------------------------------------------
# noise estimator
# ----------------------------------------------------------------------

def test_noise_estimate_symmetric_cancellation():
    cfg, weights, cube, op, pair = _setup()
    feat = T.tensor(np.random.default_rng(1).random((8, 8, 4)))
    n = N.noise_estimate(feat, feat, weights, 1e-3)
    assert np.allclose(n.data, 1e-3, atol=1e-15)
    n0 = N.noise_estimate(feat, feat, weights, 0.0)
    assert np.all(n0.data == 0.0)


def test_noise_estimate_shape_contract():
    cfg, weights, *_ = _setup()
    a = T.zeros((8, 8, 4))
    b = T.zeros((8, 8, 3))
    with pytest.raises(ShapeError):
        N.noise_estimate(a, b, weights, 1e-3)


def test_noise_estimate_grad_check():
    cfg, weights, cube, op, pair = _setup(seed=2)
    rng = np.random.default_rng(3)
    xr = T.tensor(rng.random((8, 8, 4)))

    def f(xc, conv_w):
        w = dict(weights)
        w["ne.conv.w"] = conv_w
        out = N.noise_estimate(xc, xr, w, 1e-3)
        return T.mean_all(T.mul(out, out))

    err = T.grad_check(f, [T.uniform((8, 8, 4), 4), weights["ne.conv.w"]])
    assert err < 1e-4


# ----------------------------------------------------------------------
# rgb lift
# ----------------------------------------------------------------------

def test_rgb_init_shapes_and_zero_weights():
    cfg, weights, cube, op, pair = _setup()
    out = N.rgb_init(pair.y_r, weights, cfg)
    assert out.shape == (8, 8, 4)
    wz = dict(weights)
    for k in ("rgb.lift.w", "rgb.lift.b", "rgb.proj.w", "rgb.proj.b"):
        wz[k] = T.zeros(weights[k].shape, requires_grad=True)
    assert np.all(N.rgb_init(pair.y_r, wz, cfg).data == 0.0)
    with pytest.raises(ShapeError):
        N.rgb_init(np.zeros((8, 8, 4)), weights, cfg)


def test_rgb_init_grad_check():
    cfg, weights, cube, op, pair = _setup(seed=5)

    def f(lift_w):
        w = dict(weights)
        w["rgb.lift.w"] = lift_w
        out = N.rgb_init(pair.y_r, w, cfg)
        return T.mean_all(T.mul(out, out))

    assert T.grad_check(f, [weights["rgb.lift.w"]]) < 1e-5


# ----------------------------------------------------------------------
# mixing blocks
# ----------------------------------------------------------------------

def test_spectral_mlp_zero_weights_is_identity():
    cfg, weights, *_ = _setup()
    w = dict(weights)
    for k in ("init.sp1.fc1.w", "init.sp1.fc1.b",
              "init.sp1.fc2.w", "init.sp1.fc2.b"):
        w[k] = T.zeros(weights[k].shape, requires_grad=True)
    x = T.uniform((8, 8, 8), 1)
    assert np.array_equal(N.spectral_mlp(x, w, "init.sp1").data, x.data)


def test_spectral_mlp_commutes_with_spatial_permutation():
    cfg, weights, *_ = _setup()
    x = T.uniform((8, 8, 8), 2)
    direct = N.spectral_mlp(x, weights, "init.sp1").data
    perm = np.random.default_rng(0).permutation(64)
    flat = x.data.reshape(64, 8)[perm].reshape(8, 8, 8)
    shuffled = N.spectral_mlp(T.tensor(flat), weights, "init.sp1").data
    assert np.allclose(shuffled.reshape(64, 8),
                       direct.reshape(64, 8)[perm], atol=1e-12)


def test_spectral_mlp_grad_check():
    cfg, weights, *_ = _setup(seed=6)
    x = T.uniform((4, 4, 8), 3)

    def f(xin, w1):
        w = dict(weights)
        w["init.sp1.fc1.w"] = w1
        out = N.spectral_mlp(xin, w, "init.sp1")
        return T.mean_all(T.mul(out, out))

    assert T.grad_check(f, [x, weights["init.sp1.fc1.w"]]) < 1e-5


def test_swin_mlp_zero_weights_is_identity():
    cfg, weights, *_ = _setup()
    w = dict(weights)
    for k in ("init.sw1.fc1.w", "init.sw1.fc1.b",
              "init.sw1.fc2.w", "init.sw1.fc2.b"):
        w[k] = T.zeros(weights[k].shape, requires_grad=True)
    x = T.uniform((8, 8, 8), 4)
    out = N.swin_spatial_mlp(x, w, "init.sw1", window=4, shifted=False)
    assert np.array_equal(out.data, x.data)
    out_s = N.swin_spatial_mlp(x, w, "init.sw1", window=4, shifted=True)
    assert np.array_equal(out_s.data, x.data)


def test_swin_mlp_constant_tiles_stay_constant():
    # bias-free positional mixing of equal values is constant per tile
    cfg, weights, *_ = _setup(seed=7)
    w = dict(weights)
    w["init.sw1.fc1.b"] = T.zeros(w["init.sw1.fc1.b"].shape, requires_grad=True)
    w["init.sw1.fc2.b"] = T.zeros(w["init.sw1.fc2.b"].shape, requires_grad=True)
    tile_vals = np.random.default_rng(1).random((2, 2, 8))
    x = np.repeat(np.repeat(tile_vals, 4, axis=0), 4, axis=1)
    out = N.swin_spatial_mlp(T.tensor(x), w, "init.sw1", window=4,
                             shifted=False).data
    for ti in range(2):
        for tj in range(2):
            tile = out[ti * 4:(ti + 1) * 4, tj * 4:(tj + 1) * 4]
            assert np.allclose(tile, tile[0, 0], atol=1e-12)


def test_swin_mlp_window_contract():
    cfg, weights, *_ = _setup()
    with pytest.raises(ShapeError):
        N.swin_spatial_mlp(T.zeros((6, 6, 8)), weights, "init.sw1",
                           window=4, shifted=False)


def test_swin_pair_grad_check():
    cfg, weights, *_ = _setup(seed=8)
    x = T.uniform((8, 8, 8), 5)

    def f(xin, w1):
        w = dict(weights)
        w["init.sw1.fc1.w"] = w1
        out = N.swin_spatial_mlp(xin, w, "init.sw1", window=4, shifted=False)
        out = N.swin_spatial_mlp(out, w, "init.sw2", window=4, shifted=True)
        return T.mean_all(T.mul(out, out))

    assert T.grad_check(f, [x, weights["init.sw1.fc1.w"]]) < 1e-4


# ----------------------------------------------------------------------
# stages and full model
# ----------------------------------------------------------------------

def test_stage_zeroed_fusion_is_fixed_point():
    cfg, weights, cube, op, pair = _setup()
    wz = N.zero_stage_weights(weights, "init")
    x_n = T.tensor(np.random.default_rng(2).random((8, 8, 4)))
    rgb_feat = N.rgb_init(pair.y_r, wz, cfg)
    noise_field = T.zeros((8, 8, 4))
    out = N.stage_forward(x_n, T.tensor(pair.y_c), rgb_feat, noise_field,
                          op.mask, cfg, wz, "init")
    assert np.array_equal(out.data, x_n.data)


def test_stage_exact_reprojection_zero_residual():
    # feeding the truth with zero noise makes the entering residual vanish
    cfg, weights, cube, op, pair = _setup()
    y_clean = T.tensor(O.cassi_forward(cube, op))
    r2d = T.sub(y_clean, O.cassi_forward_t(T.tensor(cube.data),
                                           T.tensor(op.mask), cfg.d))
    assert np.allclose(r2d.data, 0.0, atol=1e-15)


def test_model_forward_shapes_and_stage_counts():
    for n in (1, 3):
        cfg, weights, cube, op, pair = _setup(n_stages=n)
        out = N.model_forward(pair.y_c, pair.y_r, op, weights, cfg)
        assert out.shape == (8, 8, 4)


def test_zeroed_shared_stage_makes_depth_irrelevant():
    cfg3, weights, cube, op, pair = _setup(n_stages=3, seed=9)
    wz = N.zero_stage_weights(weights, "shared")
    out3 = N.model_forward(pair.y_c, pair.y_r, op, wz, cfg3)
    cfg5 = N.ModelConfig(n_stages=5, channels=cfg3.channels,
                         window=cfg3.window, d=cfg3.d)
    out5 = N.model_forward(pair.y_c, pair.y_r, op, wz, cfg5)
    assert np.array_equal(out3.data, out5.data)


def test_fully_zeroed_model_returns_shift_back():
    cfg, weights, cube, op, pair = _setup(n_stages=2, seed=10)
    wz = N.zero_stage_weights(N.zero_stage_weights(weights, "init"), "shared")
    out = N.model_forward(pair.y_c, pair.y_r, op, wz, cfg)
    x0 = O.shift_back_init(pair.y_c, op.dispersion, cfg.channels)
    assert np.array_equal(out.data, x0)


def test_model_window_divisibility_contract():
    cfg = N.ModelConfig(n_stages=1, channels=4, window=5, d=1)
    weights = N.init_model_weights(cfg, seed=0)
    with pytest.raises(ShapeError):
        N.model_forward(np.zeros((8, 8 + 3)), np.zeros((8, 8, 3)),
                        np.ones((8, 8)), weights, cfg)


def test_model_grad_check_end_to_end():
    cfg, weights, cube, op, pair = _setup(seed=11)

    def f(fuse_w, sp_w):
        w = dict(weights)
        w["init.fuse.w"] = fuse_w
        w["init.sp1.fc1.w"] = sp_w
        out = N.model_forward(pair.y_c, pair.y_r, op, w, cfg)
        return T.mean_all(T.mul(out, out))

    err = T.grad_check(f, [weights["init.fuse.w"], weights["init.sp1.fc1.w"]])
    assert err < 1e-4


def test_reconstruct_clamps():
    cfg, weights, cube, op, pair = _setup(seed=12)
    out = N.reconstruct(pair.y_c, pair.y_r, op, weights, cfg)
    assert out.min() >= 0.0 and out.max() <= 1.0


# ----------------------------------------------------------------------
# cost accounting
# ----------------------------------------------------------------------

def test_param_count_shared_across_stage_counts():
    counts = {n: N.param_count(N.ModelConfig(n_stages=n, channels=4, window=4))
              for n in (1, 2, 3, 5, 9)}
    assert counts[2] == counts[3] == counts[5] == counts[9]
    assert counts[1] < counts[2]


def test_param_count_matches_weights():
    cfg = N.ModelConfig(n_stages=3, channels=4, window=4)
    weights = N.init_model_weights(cfg, seed=0)
    assert N.param_count(weights) == N.param_count(cfg)
    assert N.param_count(weights) == sum(t.size for t in weights.values())


def test_flop_count_affine_in_stages():
    cfgs = {n: N.ModelConfig(n_stages=n, channels=4, window=4)
            for n in (1, 2, 3, 5, 7, 9)}
    flops = {n: N.flop_count(c, (16, 16)) for n, c in cfgs.items()}
    inc = flops[2] - flops[1]
    assert flops[3] - flops[2] == inc
    assert flops[5] - flops[3] == 2 * inc
    assert flops[7] - flops[5] == flops[9] - flops[7]


def test_per_stage_flop_increment_matches_layer_formula():
    # each linear layer of width (k -> m) costs 2*k*m per output position;
    # the per-stage increment is exactly the documented block sum
    cfg = N.ModelConfig(n_stages=1, channels=4, window=4, mlp_ratio=2.0)
    h, w = 16, 16
    hw = h * w
    s, hid = cfg.stream_width, cfg.spectral_hidden
    ww, m = cfg.window ** 2, cfg.spatial_hidden
    nt = hw // ww
    expected = (2 * hw * cfg.channels
                + 2 * (2 * (hw * s * hid + hw * hid * s))
                + 2 * (2 * (s * nt) * (ww * m + m * ww))
                + 2 * hw * s * cfg.channels)
    cfg2 = N.ModelConfig(n_stages=2, channels=4, window=4, mlp_ratio=2.0)
    assert N.flop_count(cfg2, (h, w)) - N.flop_count(cfg, (h, w)) == expected
