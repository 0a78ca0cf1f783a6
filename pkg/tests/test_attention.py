import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octran import attention as A
from octran import tensor as T
from octran.tensor import Tensor


def hand_sigma():
    # two scores 1/sqrt(2) and 0 -> weights e^s / (e^s + 1), 1 / (e^s + 1)
    s = 1 / math.sqrt(2)
    return math.exp(s) / (math.exp(s) + 1)


def test_two_key_hand_example():
    q = np.array([[1.0, 0.0]])
    k = np.array([[1.0, 0.0], [0.0, 1.0]])
    v = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = A.qkv_attention(q, k, v).data
    sigma = hand_sigma()
    assert sigma == pytest.approx(0.6698, abs=5e-5)
    assert abs(out[0, 0] - sigma) < 1e-12
    assert abs(out[0, 1] - (1 - sigma)) < 1e-12


def test_single_key_returns_value_row():
    r = np.random.default_rng(0)
    v = r.standard_normal((1, 3))
    out = A.qkv_attention(r.standard_normal((4, 5)), r.standard_normal((1, 5)), v).data
    assert np.allclose(out, v, atol=1e-15)


def test_equal_scores_average_values():
    k = np.array([[1.0, 2.0], [1.0, 2.0]])
    v = np.array([[1.0, 5.0], [3.0, -1.0]])
    out = A.qkv_attention(np.array([[0.3, -0.7]]), k, v).data
    assert np.allclose(out, v.mean(0), atol=1e-15)


def test_multi_head_matches_per_head_loop():
    r = np.random.default_rng(1)
    heads, dk, dv = 3, 4, 2
    q = r.standard_normal((5, heads * dk))
    k = r.standard_normal((7, heads * dk))
    v = r.standard_normal((7, heads * dv))
    out = A.qkv_attention(q, k, v, heads=heads).data
    for h in range(heads):
        qh, kh, vh = q[:, h * dk:(h + 1) * dk], k[:, h * dk:(h + 1) * dk], v[:, h * dv:(h + 1) * dv]
        s = qh @ kh.T / math.sqrt(dk)
        w = np.exp(s) / np.exp(s).sum(1, keepdims=True)
        assert np.allclose(out[:, h * dv:(h + 1) * dv], w @ vh, atol=1e-13)


def test_dimension_mismatch_errors():
    with pytest.raises(T.ShapeError):
        A.qkv_attention(np.ones((2, 3)), np.ones((4, 2)), np.ones((4, 1)))
    with pytest.raises(T.ShapeError):
        A.qkv_attention(np.ones((2, 3)), np.ones((4, 3)), np.ones((5, 1)))
    with pytest.raises(T.ShapeError):
        A.qkv_attention(np.ones((2, 4)), np.ones((4, 4)), np.ones((4, 4)), heads=3)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(1, 8), st.integers(0, 10_000), st.floats(0.1, 30))
def test_softmax_rows_sum_to_one(mq, mk, d, seed, scale):
    r = np.random.default_rng(seed)
    w = T.attention_weights(r.standard_normal((mq, d)) * scale, r.standard_normal((mk, d)) * scale)
    assert np.all(np.abs(w.sum(-1) - 1) < 1e-12)
    assert np.all(w >= 0)


def small_cfg(depth=1):
    return A.AttentionConfig(cross_heads=2, cross_dim_per_head=4, latent_heads=2, latent_dim_per_head=4,
                             depth=depth, ff_mult=2)


def test_perceiver_output_shape_and_batching():
    block = A.PerceiverBlock(6, 5, 8, small_cfg(2), np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((3, 11, 6))
    assert A.perceiver_block(block, x).shape == (3, 5, 8)
    single = block(x[1]).data
    assert single.shape == (5, 8)
    assert np.allclose(single, block(x).data[1], atol=1e-13)
    with pytest.raises(T.ShapeError):
        block(np.ones((4, 7)))


def test_latent_init_scale():
    block = A.PerceiverBlock(4, 64, 64, small_cfg(), np.random.default_rng(0))
    assert block.latents.data.std() == pytest.approx(0.02, rel=0.05)


def test_permutation_invariance_bit_exact():
    r = np.random.default_rng(3)
    m = 24
    feats = r.standard_normal((m, 5))
    pos = A.fourier_encode(r.uniform(-1, 1, (m, 2)), A.FourierEncoding(8.0, 3))
    tokens = np.concatenate([feats, pos], axis=1)
    block = A.PerceiverBlock(tokens.shape[1], 4, 8, small_cfg(2), np.random.default_rng(4))
    perm = r.permutation(m)
    with T.checked():
        a = block(tokens).data
        b = block(tokens[perm]).data
    assert np.array_equal(a, b)
    fast = block(tokens[perm]).data
    assert np.max(np.abs(fast - a)) < 1e-12


def test_depth_zero_is_one_cross_attention():
    block = A.PerceiverBlock(6, 3, 8, small_cfg(0), np.random.default_rng(5))
    x = np.random.default_rng(6).standard_normal((1, 9, 6))
    lat = block.latents.data
    expected = lat + block.cross(block.norm_latents(lat[None]), block.norm_inputs(x)).data[0]
    assert np.allclose(block(x).data[0], expected, atol=1e-15)
    assert block.blocks == []


def test_ledger_example_8192_vs_65536():
    macs = A.measure_attention_macs(m=64, n=8, d=16)
    assert macs["cross_scores"] == 8 * 64 * 16 == 8192
    assert macs["self_scores"] == 64 * 64 * 16 == 65536
    assert A.cross_attention_score_macs(8, 64, 16) == 8192
    assert A.self_attention_score_macs(64, 16) == 65536


def test_cross_macs_affine_self_macs_quadratic():
    ms = [32, 64, 128, 256]
    rows = [A.measure_attention_macs(m, 8, 16) for m in ms]
    for m, row in zip(ms, rows):
        assert row["cross_scores"] == 8 * m * 16
        assert row["self_scores"] == m * m * 16
    assert abs(A.quadratic_coefficient(ms, [r["cross_scores"] for r in rows])) < 1e-9
    assert abs(A.quadratic_coefficient(ms, [r["cross_total"] for r in rows])) < 1e-9
    assert A.quadratic_coefficient(ms, [r["self_scores"] for r in rows]) > 0
    assert A.quadratic_coefficient(ms, [r["self_total"] for r in rows]) > 0


def test_attention_gradients_through_projections():
    r = np.random.default_rng(7)
    mha = A.MultiHeadAttention(4, 3, 2, 3, r)
    params = [mha.to_q.weight, mha.to_k.weight, mha.to_v.weight, mha.to_out.weight]

    def fn(x, ctx, wq, wk, wv, wo):
        mha.to_q.weight, mha.to_k.weight, mha.to_v.weight, mha.to_out.weight = wq, wk, wv, wo
        return mha(x, ctx)

    errs = T.check_gradients(fn, r.standard_normal((2, 4)), r.standard_normal((5, 3)),
                             *[p.data for p in params], h=1e-5, seed=1)
    assert max(errs) < 1e-4


def test_perceiver_gradients():
    r = np.random.default_rng(8)
    block = A.PerceiverBlock(3, 2, 4, A.AttentionConfig(1, 3, 2, 2, 1, 1), r)
    errs = T.check_gradients(lambda x: block(x), r.standard_normal((5, 3)), h=1e-5, seed=2)
    assert max(errs) < 1e-4


# --- Fourier features -------------------------------------------------------------------

def test_fourier_at_zero():
    enc = A.FourierEncoding(64.0, 5)
    f = A.fourier_encode(np.zeros(3), enc)
    assert f.shape == (enc.out_dim(3),) == (3 * 10 + 3,)
    per = f[:30].reshape(3, 10)
    assert np.all(per[:, :5] == 0) and np.all(per[:, 5:] == 1)


def test_fourier_single_band():
    enc = A.FourierEncoding(2.0, 1, include_input=False)
    assert enc.frequencies.tolist() == [1.0]
    p = np.array([[0.3]])
    assert np.allclose(A.fourier_encode(p, enc), [[math.sin(math.pi * 0.3), math.cos(math.pi * 0.3)]], atol=1e-15)


def test_fourier_band_spacing():
    enc = A.FourierEncoding(500000.0, 6)
    f = enc.frequencies
    assert f[0] == pytest.approx(1.0) and f[-1] == pytest.approx(250000.0)
    assert np.allclose(f[1:] / f[:-1], (250000.0) ** (1 / 5))


@given(st.integers(1, 4), st.integers(1, 8), st.booleans())
def test_fourier_output_length(dims, bands, inc):
    enc = A.FourierEncoding(10.0, bands, inc)
    out = A.fourier_encode(np.zeros((7, dims)), enc)
    assert out.shape == (7, dims * 2 * bands + (dims if inc else 0))


def test_fourier_rejects_out_of_range():
    with pytest.raises(ValueError):
        A.fourier_encode(np.array([1.5]), A.FourierEncoding(4.0))
    with pytest.raises(ValueError):
        A.FourierEncoding(0.0)
    with pytest.raises(ValueError):
        A.FourierEncoding(4.0, 0)


def test_grid_positions_centres():
    g = A.grid_positions(2, 4)
    assert g.shape == (2, 4, 2)
    assert g[0, 0].tolist() == [-0.5, -0.75] and g[1, 3].tolist() == [0.5, 0.75]


# --- pyramid and chunking ---------------------------------------------------------------

def reference_pyramid(channels=2, seed=0):
    r = np.random.default_rng(seed)
    levels = {}
    for j in A.PYRAMID_LEVELS:
        h, w = A.level_shape(j)
        levels[j] = Tensor(r.standard_normal((1, channels, h, w)))
    return A.FeaturePyramid(levels)


def test_level_shape_law():
    assert [A.level_shape(j) for j in range(5)] == [(2, 8), (4, 16), (8, 32), (16, 64), (32, 128)]
    assert A.level_shape(0, (32, 128)) is None
    assert A.level_shape(1, (32, 128)) == (1, 4)
    assert A.level_shape(2, (32, 128)) == (2, 8)


def test_chunk_example_level1():
    p = reference_pyramid()
    assert p.shape(1) == (4, 16, 2)
    chunks = A.chunk_features(p, 4)
    c1 = chunks[1][1].data
    assert c1.shape == (1, 2, 4, 4)
    assert np.array_equal(c1, p.levels[1].data[..., 4:8])


def test_single_chunk_is_whole_layer():
    p = reference_pyramid()
    (only,) = A.chunk_features(p, 1)
    for j in A.PYRAMID_LEVELS:
        assert np.array_equal(only[j].data, p.levels[j].data)


def test_legal_counts_and_rejection():
    p = reference_pyramid()
    assert A.legal_chunk_counts(p) == [1, 2, 4, 8]
    with pytest.raises(T.ShapeError):
        A.chunk_features(p, 3)
    with pytest.raises(ValueError):
        A.chunk_features(p, 0)


def test_chunks_partition_every_layer():
    """Label every cell with its (row, col) and compare sets brute force."""
    base = reference_pyramid()
    levels = {}
    for j, t in base.levels.items():
        h, w = t.shape[2:]
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        levels[j] = Tensor(np.stack([rows, cols]).astype(float)[None])
    p = A.FeaturePyramid(levels)
    for c in A.legal_chunk_counts(p):
        chunks = A.chunk_features(p, c)
        for j in A.PYRAMID_LEVELS:
            h, w = A.level_shape(j)
            seen = []
            for i, chunk in enumerate(chunks):
                cells = {(int(a), int(b)) for a, b in chunk[j].data[0].reshape(2, -1).T}
                assert cells == {(a, b) for a in range(h) for b in range(i * w // c, (i + 1) * w // c)}
                seen.append(cells)
            assert sum(len(s) for s in seen) == h * w
            assert set().union(*seen) == {(a, b) for a in range(h) for b in range(w)}
            whole = np.concatenate([chunk[j].data for chunk in chunks], axis=-1)
            assert np.array_equal(whole, p.levels[j].data)


def test_pyramid_rejects_mixed_channels():
    with pytest.raises(T.ShapeError):
        A.FeaturePyramid({0: Tensor(np.ones((1, 2, 2, 8))), 1: Tensor(np.ones((1, 3, 4, 16)))})
