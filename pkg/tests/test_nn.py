import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slat3d.metrics.gradcheck import fd_gradcheck
from slat3d.nn import (
    AdaLNBlockWeights,
    UNetConfig,
    WindowConfig,
    adaln_block,
    cross_attention,
    init_unet,
    kl_penalty,
    kl_penalty_grad,
    pixel_shuffle3d,
    qk_rmsnorm,
    self_attention,
    sinusoidal_pe,
    unet_decode,
    unet_encode,
    window_partition,
    windowed_mhsa,
)
from slat3d.nn.attention import CrossAttentionWeights, random_attention
from slat3d.nn.layers import softmax
from slat3d.nn.transformers import (
    LatentFlowTransformer,
    SparseBackbone,
    StructureFlowTransformer,
    load_model,
    save_model,
)
from slat3d.nn.unet3d import conv3d, conv_unet3d_forward
from slat3d.sparse import from_dense


def masked_dense_oracle(x, w, mask):
    """Per-head loops over the explicit formula with a boolean attend-mask."""
    d = w.dim
    hd = d // w.heads
    qkv = x @ w.qkv.weight + w.qkv.bias
    out = np.zeros((x.shape[0], d))
    for h in range(w.heads):
        sl = slice(h * hd, (h + 1) * hd)
        q = qkv[:, :d][:, sl]
        k = qkv[:, d:2 * d][:, sl]
        v = qkv[:, 2 * d:][:, sl]
        q = q / np.sqrt((q**2).mean(1, keepdims=True) + 1e-6) * w.q_gain
        k = k / np.sqrt((k**2).mean(1, keepdims=True) + 1e-6) * w.k_gain
        for i in range(x.shape[0]):
            s = np.array([q[i] @ k[j] / math.sqrt(hd) if mask[i, j] else -np.inf for j in range(x.shape[0])])
            p = np.exp(s - s.max())
            p /= p.sum()
            out[i, sl] = p @ v
    return out @ w.proj.weight + w.proj.bias


def block_mask(coords, cfg):
    gid = np.empty(len(coords), int)
    for g, idx in enumerate(window_partition(coords, cfg)):
        gid[idx] = g
    return gid[:, None] == gid[None, :]


# -- positional encoding / norms --------------------------------------------------


def test_pe_zero_phase_and_range():
    pe = sinusoidal_pe((0, 0, 0), 24)
    per = 24 // 3
    for a in range(3):
        blk = pe[a * per:(a + 1) * per]
        assert np.all(blk[: per // 2] == 0) and np.all(blk[per // 2:] == 1)
    rng = np.random.default_rng(0)
    many = sinusoidal_pe(rng.integers(0, 64, (500, 3)), 48)
    assert np.all(np.abs(many) <= 1)


def test_pe_no_collisions():
    rng = np.random.default_rng(1)
    keys = rng.choice(64**3, 4096, replace=False)
    coords = np.stack(np.unravel_index(keys, (64, 64, 64)), 1)
    pe = sinusoidal_pe(coords, 48)
    sq = (pe**2).sum(1)
    d2 = sq[:, None] + sq[None] - 2 * pe @ pe.T
    np.fill_diagonal(d2, np.inf)
    assert np.sqrt(max(d2.min(), 0)) > 1e-6


def test_pe_dim_must_divide_by_6():
    with pytest.raises(ValueError):
        sinusoidal_pe((1, 2, 3), 32)


def test_qk_rmsnorm_cases():
    np.testing.assert_allclose(qk_rmsnorm(np.full(8, -3.0)), -1.0, atol=1e-6)
    assert np.all(qk_rmsnorm(np.zeros(8)) == 0)
    x = np.random.default_rng(2).normal(size=(4, 10, 16))
    rms = np.sqrt((qk_rmsnorm(x, np.ones(16)) ** 2).mean(-1))
    np.testing.assert_allclose(rms, 1.0, atol=1e-5)


def test_softmax_rows_sum_to_one():
    s = softmax(np.random.default_rng(3).normal(size=(20, 30)) * 50)
    np.testing.assert_allclose(s.sum(1), 1.0, atol=1e-12)


# -- windows ------------------------------------------------------------------------


def _group_of(coords, cfg):
    out = {}
    for g, idx in enumerate(window_partition(np.array(coords), cfg)):
        for i in idx:
            out[int(i)] = g
    return out


def test_window_boundaries():
    g = _group_of([(7, 7, 7), (8, 0, 0)], WindowConfig(8, (0, 0, 0)))
    assert g[0] != g[1]
    g = _group_of([(3, 0, 0), (4, 0, 0)], WindowConfig(8, (4, 4, 4)))
    assert g[0] != g[1]
    g = _group_of([(4, 0, 0), (11, 3, 3)], WindowConfig(8, (4, 4, 4)))
    assert g[0] == g[1]


def test_window_config_validation():
    with pytest.raises(ValueError):
        WindowConfig(8, (8, 0, 0))
    with pytest.raises(ValueError):
        WindowConfig(8, (-1, 0, 0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(0, 0, 0), (4, 4, 4), (1, 2, 3)]))
def test_window_partition_is_partition(seed, shift):
    rng = np.random.default_rng(seed)
    coords = np.unique(rng.integers(0, 32, (rng.integers(1, 300), 3)), axis=0)
    groups = window_partition(coords, WindowConfig(8, shift))
    flat = np.concatenate(groups)
    assert sorted(flat.tolist()) == list(range(len(coords)))
    for g in groups:
        w = (coords[g] + shift) // 8
        assert np.all(w == w[0])


def test_windowed_single_token_is_value_projection():
    w = random_attention(0, 12, 3)
    x = np.random.default_rng(0).normal(size=(1, 12))
    out = windowed_mhsa(x, np.array([[5, 5, 5]]), w, WindowConfig())
    v = (x @ w.qkv.weight + w.qkv.bias)[:, 24:]
    np.testing.assert_allclose(out, v @ w.proj.weight + w.proj.bias, atol=1e-12)


def test_windowed_one_window_equals_full():
    rng = np.random.default_rng(1)
    w = random_attention(1, 12, 2)
    coords = np.unique(rng.integers(0, 8, (40, 3)), axis=0)
    x = rng.normal(size=(len(coords), 12))
    np.testing.assert_allclose(windowed_mhsa(x, coords, w, WindowConfig()), self_attention(x, w), atol=1e-12)


@pytest.mark.parametrize("shift", [(0, 0, 0), (4, 4, 4)])
def test_windowed_matches_masked_oracle(shift):
    rng = np.random.default_rng(7)
    coords = np.argwhere(rng.random((12, 12, 12)) < 0.08)
    w = random_attention(3, 12, 3)
    x = rng.normal(size=(len(coords), 12))
    cfg = WindowConfig(8, shift)
    got = windowed_mhsa(x, coords, w, cfg)
    want = masked_dense_oracle(x, w, block_mask(coords, cfg))
    assert np.max(np.abs(got - want)) < 1e-6


def test_windowed_shape_mismatch():
    w = random_attention(0, 12, 3)
    with pytest.raises(ValueError):
        windowed_mhsa(np.zeros((3, 12)), np.zeros((2, 3), int), w, WindowConfig())


def test_windowed_group_order_irrelevant():
    rng = np.random.default_rng(4)
    g = from_dense(rng.random((16, 16, 16)) < 0.05)
    w = random_attention(2, 12, 3)
    x = rng.normal(size=(g.num_active, 12))
    perm = rng.permutation(g.num_active)
    a = windowed_mhsa(x, g.coords, w, WindowConfig(8, (4, 4, 4)))
    b = windowed_mhsa(x[perm], g.coords[perm], w, WindowConfig(8, (4, 4, 4)))
    np.testing.assert_allclose(a[perm], b, atol=1e-12)


# -- cross attention ------------------------------------------------------------------


def _cross(seed, d=12, dc=5, heads=3):
    rng = np.random.default_rng(seed)
    w = CrossAttentionWeights.init(rng, d, dc, heads)
    for lin in (w.q, w.kv, w.proj):
        lin.bias = 0.1 * rng.normal(size=lin.bias.shape)
    return w, rng


def test_cross_single_cond_token():
    w, rng = _cross(0)
    x = rng.normal(size=(6, 12))
    c = rng.normal(size=(1, 5))
    v = (c @ w.kv.weight + w.kv.bias)[:, 12:]
    out = cross_attention(x, c, w)
    np.testing.assert_allclose(out, np.repeat(v @ w.proj.weight + w.proj.bias, 6, 0), atol=1e-12)


def test_cross_duplicate_cond_invariant():
    w, rng = _cross(1)
    x = rng.normal(size=(6, 12))
    c = rng.normal(size=(4, 5))
    np.testing.assert_allclose(cross_attention(x, c, w), cross_attention(x, np.vstack([c, c]), w), atol=1e-12)


def test_cross_matches_dense_formula():
    w, rng = _cross(2)
    x = rng.normal(size=(7, 12))
    c = rng.normal(size=(9, 5))
    q = x @ w.q.weight + w.q.bias
    kv = c @ w.kv.weight + w.kv.bias
    out = np.zeros((7, 12))
    for h in range(3):
        sl = slice(4 * h, 4 * h + 4)
        s = q[:, sl] @ kv[:, :12][:, sl].T / 2.0
        p = np.exp(s) / np.exp(s).sum(1, keepdims=True)
        out[:, sl] = p @ kv[:, 12:][:, sl]
    np.testing.assert_allclose(cross_attention(x, c, w), out @ w.proj.weight + w.proj.bias, atol=1e-12)


def test_cross_empty_cond():
    w, _ = _cross(3)
    with pytest.raises(ValueError):
        cross_attention(np.zeros((2, 12)), np.zeros((0, 5)), w)


# -- adaLN blocks ----------------------------------------------------------------------


def _rand_block(seed, d=12, heads=3, dc=5):
    rng = np.random.default_rng(seed)
    w = AdaLNBlockWeights.init(rng, d, heads, dc, t_dim=8)
    w.adaln.weight = rng.normal(size=w.adaln.weight.shape) * 0.3
    w.adaln.bias = rng.normal(size=w.adaln.bias.shape) * 0.3
    return w, rng


def test_adaln_zero_gates_identity():
    w, rng = _rand_block(0)
    w.adaln.weight[:, 2 * 12:3 * 12] = 0
    w.adaln.bias[2 * 12:3 * 12] = 0
    for k in (5, 8):
        w.adaln.weight[:, k * 12:(k + 1) * 12] = 0
        w.adaln.bias[k * 12:(k + 1) * 12] = 0
    x = rng.normal(size=(10, 12))
    coords = rng.integers(0, 16, (10, 3))
    out = adaln_block(x, coords, rng.normal(size=8), rng.normal(size=(3, 5)), w, WindowConfig())
    assert np.array_equal(out, x)


def test_adaln_fresh_init_identity():
    rng = np.random.default_rng(1)
    w = AdaLNBlockWeights.init(rng, 12, 3, 5)
    x = rng.normal(size=(6, 12))
    assert np.array_equal(adaln_block(x, None, rng.normal(size=12), rng.normal(size=(2, 5)), w), x)


def test_adaln_zero_sublayers_identity():
    w, rng = _rand_block(2)
    for lin in (w.attn.proj, w.cross.proj, w.ffn.fc2):
        lin.weight[:] = 0
        lin.bias[:] = 0
    x = rng.normal(size=(5, 12))
    out = adaln_block(x, None, rng.normal(size=8), rng.normal(size=(2, 5)), w)
    np.testing.assert_array_equal(out, x)


def adaln_oracle(x, t, c, w):
    """Straight-line reimplementation from the block definition."""
    d = 12
    te = t / (1 + np.exp(-t))
    mod = te @ w.adaln.weight + w.adaln.bias
    ch = [mod[i * d:(i + 1) * d] for i in range(9)]

    def ln(v):
        return (v - v.mean(1, keepdims=True)) / np.sqrt(v.var(1, keepdims=True) + 1e-6)

    h = ln(x) * ch[1] + ch[0]
    x = x + ch[2] * masked_dense_oracle(h, w.attn, np.ones((len(x), len(x)), bool))
    h = ln(x) * ch[4] + ch[3]
    q = h @ w.cross.q.weight + w.cross.q.bias
    kv = c @ w.cross.kv.weight + w.cross.kv.bias
    att = np.zeros_like(q)
    for hh in range(3):
        sl = slice(4 * hh, 4 * hh + 4)
        s = q[:, sl] @ kv[:, :d][:, sl].T / 2.0
        p = np.exp(s - s.max(1, keepdims=True))
        att[:, sl] = (p / p.sum(1, keepdims=True)) @ kv[:, d:][:, sl]
    x = x + ch[5] * (att @ w.cross.proj.weight + w.cross.proj.bias)
    h = ln(x) * ch[7] + ch[6]
    a = h @ w.ffn.fc1.weight + w.ffn.fc1.bias
    a = 0.5 * a * (1 + np.tanh(np.sqrt(2 / np.pi) * (a + 0.044715 * a**3)))
    return x + ch[8] * (a @ w.ffn.fc2.weight + w.ffn.fc2.bias)


def test_adaln_matches_oracle():
    w, rng = _rand_block(3)
    w.attn.q_gain = 1 + 0.1 * rng.normal(size=4)
    x = rng.normal(size=(9, 12))
    t, c = rng.normal(size=8), rng.normal(size=(4, 5))
    got = adaln_block(x, None, t, c, w)
    assert np.all(np.isfinite(got))
    np.testing.assert_allclose(got, adaln_oracle(x, t, c, w), atol=1e-10)


# -- conv U-Net --------------------------------------------------------------------------


def test_pixel_shuffle_bit_order():
    x = np.arange(8.0).reshape(1, 1, 1, 8)
    y = pixel_shuffle3d(x)
    assert y.shape == (2, 2, 2, 1)
    for dx in range(2):
        for dy in range(2):
            for dz in range(2):
                assert y[dx, dy, dz, 0] == 4 * dz + 2 * dy + dx


def test_conv3d_matches_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 4, 6, 2))
    w = rng.normal(size=(3, 3, 3, 2, 3))
    out = conv3d(x, w)
    ref = np.zeros((5, 4, 6, 3))
    for a in range(5):
        for b in range(4):
            for c in range(6):
                for i in range(3):
                    for j in range(3):
                        for k in range(3):
                            p = (a + i - 1, b + j - 1, c + k - 1)
                            if all(0 <= p[m] < x.shape[m] for m in range(3)):
                                ref[a, b, c] += x[p] @ w[i, j, k]
    np.testing.assert_allclose(out, ref, atol=1e-12)
    np.testing.assert_allclose(conv3d(x, w, stride=2), ref[::2, ::2, ::2], atol=1e-12)


def test_unet_shapes_at_64():
    cfg = UNetConfig(channels=(2, 4, 8), num_res_blocks=1, mid_blocks=1)
    p = init_unet(cfg, seed=0)
    occ = np.zeros((64, 64, 64))
    occ[20:40, 20:40, 20:40] = 1
    mean, logvar = unet_encode(occ, p, cfg)
    assert mean.shape == (16, 16, 16, 8) and logvar.shape == (16, 16, 16, 8)
    logits = unet_decode(mean, p, cfg)
    assert logits.shape == (64, 64, 64) and np.all(np.isfinite(logits))
    fwd = conv_unet3d_forward(occ, p, cfg)
    assert np.array_equal(fwd[0], mean) and np.array_equal(fwd[1], logvar)
    assert np.array_equal(conv_unet3d_forward(mean, p, cfg, inverse=True), logits)


def test_unet_zero_weights_zero_logits():
    cfg = UNetConfig(channels=(2, 4), num_res_blocks=1, mid_blocks=1)
    p = {k: np.zeros_like(v) for k, v in init_unet(cfg, 1).items()}
    out = unet_decode(np.random.default_rng(0).normal(size=(4, 4, 4, 8)), p, cfg)
    assert out.shape == (8, 8, 8) and np.all(out == 0)


def test_unet_shape_errors():
    cfg = UNetConfig(channels=(2, 4), num_res_blocks=1, mid_blocks=0)
    p = init_unet(cfg, 1)
    with pytest.raises(ValueError):
        unet_encode(np.zeros((5, 8, 8)), p, cfg)
    p["enc.in"] = np.zeros((3, 3, 3, 1, 5))
    with pytest.raises(ValueError):
        unet_encode(np.zeros((8, 8, 8)), p, cfg)


def test_unet_default_config_constants():
    cfg = UNetConfig()
    assert cfg.channels == (32, 128, 512) and cfg.latent_channels == 8 and cfg.factor == 4


def test_kl_values_and_grad():
    assert kl_penalty(np.zeros(5), np.zeros(5)) == 0
    assert kl_penalty(np.ones(5), np.zeros(5)) == 0.5
    rng = np.random.default_rng(0)
    m, lv = rng.normal(size=12), rng.normal(size=12)
    theta = np.concatenate([m, lv])

    def grad(th):
        return np.concatenate(kl_penalty_grad(th[:12], th[12:]))

    err, _ = fd_gradcheck(lambda th: kl_penalty(th[:12], th[12:]), grad, theta)
    assert err < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=2))
def test_kl_nonnegative(v):
    assert kl_penalty(np.array([v[0]]), np.array([v[1]])) >= 0


# -- stacks ---------------------------------------------------------------------------------


def assert_archive_stable(tmp_path, model, ref, run):
    # archives hold f32, so one trip quantizes and a second trip is exact
    save_model(tmp_path / "a", model)
    once = load_model(tmp_path / "a")
    np.testing.assert_allclose(run(once), ref, rtol=1e-4, atol=1e-4)
    save_model(tmp_path / "b", once)
    assert np.array_equal(run(load_model(tmp_path / "b")), run(once))


def test_backbone_deterministic_and_archive(tmp_path):
    rng = np.random.default_rng(0)
    g = from_dense(rng.random((16, 16, 16)) < 0.05)
    g = g.with_features(rng.normal(size=(g.num_active, 4)))
    bb = SparseBackbone.init(5, 4, 6, dim=24, heads=2, depth=2)
    a = bb(g)
    assert a.shape == (g.num_active, 6)
    assert np.array_equal(a, SparseBackbone.init(5, 4, 6, dim=24, heads=2, depth=2)(g))
    assert_archive_stable(tmp_path, bb, a, lambda m: m(g))


def test_structure_flow_roundtrip(tmp_path):
    m = StructureFlowTransformer.init(1, resolution=4, channels=2, dim=12, heads=2, depth=1, cond_dim=3)
    # fresh blocks are gated off; open the gates so the condition matters
    m.blocks[0].adaln.bias[:] = 0.5
    x = np.random.default_rng(0).normal(size=(4, 4, 4, 2))
    v = m(x, 0.3, np.ones((2, 3)))
    assert v.shape == x.shape and np.all(np.isfinite(v))
    assert_archive_stable(tmp_path, m, v, lambda mm: mm(x, 0.3, np.ones((2, 3))))
    assert not np.array_equal(m(x, 0.3, None), v)


def test_latent_flow_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    s = from_dense(rng.random((8, 8, 8)) < 0.2)
    m = LatentFlowTransformer.init(3, channels=4, width=6, dim=12, heads=2, depth=1)
    x = rng.normal(size=(s.num_active, 4))
    v = m(x, 0.7, None, structure=s)
    assert v.shape == x.shape
    assert_archive_stable(tmp_path, m, v, lambda mm: mm(x, 0.7, None, structure=s))
