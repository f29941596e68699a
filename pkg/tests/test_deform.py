"""Deformable patch embedding / mixer: reductions, clamps, shape contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panodeform import deform
from panodeform import tensor as T
from panodeform.deform import PatchEmbedConfig
from panodeform.tensor import ShapeError, Tensor


def _zero_offset_params(cfg: PatchEmbedConfig, rng):
    g = cfg.size * cfg.size
    conv_w = Tensor(np.zeros((3, 3, cfg.in_channels, 2 * g)))
    conv_b = Tensor(np.zeros(2 * g))
    proj_w = Tensor(rng.standard_normal((g * cfg.in_channels, cfg.out_channels)))
    proj_b = Tensor(rng.standard_normal(cfg.out_channels))
    return conv_w, conv_b, proj_w, proj_b


# -- fixed-grid embedding -------------------------------------------------------


def test_patch_count_8x8_s4():
    rng = np.random.default_rng(0)
    cfg = PatchEmbedConfig(size=4, stride=4, in_channels=1, out_channels=2, deformable=False)
    _, _, pw, pb = _zero_offset_params(cfg, rng)
    out = deform.standard_pe(Tensor(rng.standard_normal((8, 8, 1))), pw, pb, cfg)
    assert out.shape == (2, 2, 2)  # H*W/s^2 = 4 patches


def test_fixed_offsets_span_for_3x3_patch():
    deltas = np.arange(3) - 3 // 2
    assert deltas.tolist() == [-1, 0, 1]
    coords = deform.fixed_patch_coords(6, 6, 3, 3)
    # center patch (1,1) has center (4,4): offsets relative to it lie in [-1,1]^2
    block = coords.reshape(2, 2, 9, 2)[1, 1] - np.array([4.0, 4.0])
    assert block.min() == -1.0 and block.max() == 1.0


def test_identity_projection_reproduces_raw_patch():
    rng = np.random.default_rng(2)
    cfg = PatchEmbedConfig(size=2, stride=2, in_channels=3, out_channels=12, deformable=False)
    f = rng.uniform(0, 1, (4, 6, 3))
    pw = Tensor(np.eye(12))
    pb = Tensor(np.zeros(12))
    out = deform.standard_pe(Tensor(f), pw, pb, cfg)
    patch = out.data[1, 2].reshape(2, 2, 3)
    assert np.array_equal(patch, f[2:4, 4:6])


def test_standard_pe_divisibility_error():
    cfg = PatchEmbedConfig(size=3, stride=3, in_channels=1, out_channels=1, deformable=False)
    pw, pb = Tensor(np.zeros((9, 1))), Tensor(np.zeros(1))
    with pytest.raises(ShapeError):
        deform.standard_pe(Tensor(np.zeros((7, 9, 1))), pw, pb, cfg)


# -- offset prediction -----------------------------------------------------------


def test_zero_initialized_predictor_gives_zero_offsets():
    rng = np.random.default_rng(3)
    f = Tensor(rng.standard_normal((8, 8, 2)))
    field = deform.predict_offsets(f, Tensor(np.zeros((3, 3, 2, 8))), Tensor(np.zeros(8)), 4, 4.0)
    assert np.all(field.offsets.data == 0.0)


def test_offsets_respect_clamp_window():
    rng = np.random.default_rng(4)
    f = Tensor(rng.standard_normal((32, 16, 2)) * 100)
    conv_w = Tensor(rng.standard_normal((3, 3, 2, 4)) * 10)
    conv_b = Tensor(rng.standard_normal(4) * 10)
    field = deform.predict_offsets(f, conv_w, conv_b, 2, 4.0)
    assert field.bounds == (8.0, 4.0)
    assert np.all(np.abs(field.offsets.data[..., 0]) <= 8.0)
    assert np.all(np.abs(field.offsets.data[..., 1]) <= 4.0)


def test_raw_prediction_clamps_to_w_over_r():
    # a huge constant bias saturates the clamp: W=40, r=4 -> +-10 columns
    f = Tensor(np.zeros((40, 40, 1)))
    conv_w = Tensor(np.zeros((3, 3, 1, 2)))
    conv_b = Tensor(np.array([100.0, 100.0]))
    field = deform.predict_offsets(f, conv_w, conv_b, 1, 4.0)
    assert np.all(field.offsets.data == 10.0)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([1, 2, 4, 8]), st.integers(0, 2**31 - 1))
def test_clamp_bounds_property(r, seed):
    rng = np.random.default_rng(seed)
    h = int(rng.integers(8, 40))
    w = int(rng.integers(8, 40))
    f = Tensor(rng.standard_normal((h, w, 2)) * rng.uniform(0, 50))
    conv_w = Tensor(rng.standard_normal((3, 3, 2, 6)) * rng.uniform(0, 5))
    conv_b = Tensor(rng.standard_normal(6) * rng.uniform(0, 5))
    field = deform.predict_offsets(f, conv_w, conv_b, 3, float(r))
    assert np.all(np.abs(field.offsets.data[..., 0]) <= h / r)
    assert np.all(np.abs(field.offsets.data[..., 1]) <= w / r)


# -- deformable embedding ---------------------------------------------------------


def test_dpe_with_zero_offsets_equals_standard_pe_bitwise():
    rng = np.random.default_rng(5)
    for _ in range(10):
        s = int(rng.choice([2, 3, 4]))
        stride = s
        cin = int(rng.integers(1, 4))
        cout = int(rng.integers(1, 6))
        h = stride * int(rng.integers(2, 5))
        w = stride * int(rng.integers(2, 5))
        cfg = PatchEmbedConfig(size=s, stride=stride, in_channels=cin, out_channels=cout)
        cw, cb, pw, pb = _zero_offset_params(cfg, rng)
        f = Tensor(rng.standard_normal((h, w, cin)))
        a = deform.deformable_pe(f, cw, cb, pw, pb, cfg)
        b = deform.standard_pe(f, pw, pb, cfg)
        assert np.array_equal(a.data, b.data)


def test_dpe_output_shape_64x128():
    rng = np.random.default_rng(6)
    cfg = PatchEmbedConfig(size=7, stride=4, in_channels=3, out_channels=32)
    cw, cb, pw, pb = _zero_offset_params(cfg, rng)
    out = deform.deformable_pe(Tensor(rng.uniform(0, 1, (64, 128, 3))), cw, cb, pw, pb, cfg)
    assert out.shape == (16, 32, 32)


def test_dpe_offset_path_receives_gradient():
    rng = np.random.default_rng(7)
    cfg = PatchEmbedConfig(size=3, stride=2, in_channels=2, out_channels=3)
    g = cfg.size**2
    cw = Tensor(rng.standard_normal((3, 3, 2, 2 * g)) * 0.05, requires_grad=True)
    cb = Tensor(rng.uniform(0.2, 0.4, 2 * g), requires_grad=True)
    pw = Tensor(rng.standard_normal((g * 2, 3)), requires_grad=True)
    pb = Tensor(np.zeros(3), requires_grad=True)
    f = Tensor(rng.uniform(0, 1, (8, 10, 2)))
    out = deform.deformable_pe(f, cw, cb, pw, pb, cfg)
    T.sum_all(T.mul(out, Tensor(rng.standard_normal(out.shape)))).backward()
    assert cw.grad is not None and np.abs(cw.grad).max() > 0
    assert np.abs(cb.grad).max() > 0


# -- token mixing -----------------------------------------------------------------


def test_vanilla_mix_is_permutation_equivariant():
    rng = np.random.default_rng(8)
    z = rng.standard_normal((10, 4))
    w = Tensor(rng.standard_normal((4, 5)))
    b = Tensor(rng.standard_normal(5))
    perm = rng.permutation(10)
    a = deform.mlp_mix(Tensor(z[perm]), w, b)
    bb = deform.mlp_mix(Tensor(z), w, b)
    assert np.array_equal(a.data, bb.data[perm])


def test_vanilla_mix_identity_weights():
    z = np.random.default_rng(9).standard_normal((6, 3))
    out = deform.mlp_mix(Tensor(z), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    assert np.array_equal(out.data, z)


def test_vanilla_mix_matches_matmul_oracle():
    rng = np.random.default_rng(10)
    z, w, b = rng.standard_normal((7, 3)), rng.standard_normal((3, 4)), rng.standard_normal(4)
    out = deform.mlp_mix(Tensor(z), Tensor(w), Tensor(b))
    assert np.allclose(out.data, z @ w + b, atol=0)


def test_dmlp_zero_offsets_equals_vanilla_bitwise():
    rng = np.random.default_rng(11)
    for _ in range(10):
        h, w, c = int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 5))
        cout = int(rng.integers(1, 5))
        f = rng.standard_normal((h, w, c))
        fc_w = Tensor(rng.standard_normal((c, cout)))
        fc_b = Tensor(rng.standard_normal(cout))
        g = deform.offset_groups(c)
        out = deform.deformable_mlp_mix(
            Tensor(f), Tensor(np.zeros((3, 3, c, 2 * g))), Tensor(np.zeros(2 * g)), fc_w, fc_b
        )
        ref = deform.mlp_mix(Tensor(f.reshape(h * w, c)), fc_w, fc_b)
        assert np.array_equal(out.data.reshape(h * w, cout), ref.data)


def test_dmlp_constant_map_is_offset_invariant():
    rng = np.random.default_rng(12)
    c = 3
    f = Tensor(np.full((5, 7, c), 2.5))
    fc_w = Tensor(rng.standard_normal((c, c)))
    fc_b = Tensor(rng.standard_normal(c))
    out1 = deform.deformable_mlp_mix(
        f, Tensor(np.zeros((3, 3, c, 2 * c))), Tensor(np.zeros(2 * c)), fc_w, fc_b
    )
    out2 = deform.deformable_mlp_mix(
        f, Tensor(rng.standard_normal((3, 3, c, 2 * c))), Tensor(rng.uniform(-1, 1, 2 * c)), fc_w, fc_b
    )
    assert np.allclose(out1.data, out2.data, atol=1e-12)


def test_dmlp_matches_naive_gather_oracle():
    rng = np.random.default_rng(13)
    h, w, c, cout = 4, 4, 2, 3
    f = rng.standard_normal((h, w, c))
    conv_w = rng.standard_normal((3, 3, c, 2 * c)) * 0.1
    conv_b = rng.uniform(-0.8, 0.8, 2 * c)
    fc_w = rng.standard_normal((c, cout))
    fc_b = rng.standard_normal(cout)
    out = deform.deformable_mlp_mix(
        Tensor(f), Tensor(conv_w), Tensor(conv_b), Tensor(fc_w), Tensor(fc_b)
    )

    # naive reference: explicit conv, clamp, per-channel bilinear gather, matmul
    def conv_at(i, j):
        acc = conv_b.copy()
        for u in (-1, 0, 1):
            for v in (-1, 0, 1):
                ii, jj = i + u, j + v
                if 0 <= ii < h and 0 <= jj < w:
                    acc += f[ii, jj] @ conv_w[u + 1, v + 1]
        return acc

    def sample(channel, y, x):
        y = min(max(y, 0.0), h - 1.0)
        x = min(max(x, 0.0), w - 1.0)
        y0, x0 = int(np.floor(y)), int(np.floor(x))
        y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
        fy, fx = y - y0, x - x0
        return (
            f[y0, x0, channel] * (1 - fy) * (1 - fx)
            + f[y0, x1, channel] * (1 - fy) * fx
            + f[y1, x0, channel] * fy * (1 - fx)
            + f[y1, x1, channel] * fy * fx
        )

    expected = np.zeros((h, w, cout))
    for i in range(h):
        for j in range(w):
            raw = conv_at(i, j).reshape(c, 2)
            gathered = np.zeros(c)
            for ch in range(c):
                dy = np.clip(raw[ch, 0], -h / 4.0, h / 4.0)
                dx = np.clip(raw[ch, 1], -w / 4.0, w / 4.0)
                gathered[ch] = sample(ch, i + dy, j + dx)
            expected[i, j] = gathered @ fc_w + fc_b
    assert np.allclose(out.data, expected, atol=1e-12)


def test_dmlp_group_cap_round_robin():
    rng = np.random.default_rng(14)
    c = deform.MAX_OFFSET_GROUPS + 8
    assert deform.offset_groups(c) == deform.MAX_OFFSET_GROUPS
    g = deform.MAX_OFFSET_GROUPS
    f = Tensor(rng.standard_normal((3, 3, c)))
    out = deform.deformable_mlp_mix(
        f,
        Tensor(rng.standard_normal((3, 3, c, 2 * g)) * 0.05),
        Tensor(rng.uniform(-0.5, 0.5, 2 * g)),
        Tensor(np.eye(c)),
        Tensor(np.zeros(c)),
    )
    assert out.shape == (3, 3, c)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_shape_contract_random_sizes(hm, wm, seed):
    rng = np.random.default_rng(seed)
    s = int(rng.choice([2, 3]))
    h, w = s * hm * 2, s * wm * 2
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    cfg = PatchEmbedConfig(size=s, stride=s, in_channels=cin, out_channels=cout)
    cw, cb, pw, pb = _zero_offset_params(cfg, rng)
    out = deform.deformable_pe(Tensor(rng.standard_normal((h, w, cin))), cw, cb, pw, pb, cfg)
    assert out.shape == (h // s, w // s, cout)
