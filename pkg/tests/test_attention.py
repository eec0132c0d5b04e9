import numpy as np
import pytest

from stmambasync import tensor as T
from stmambasync.attention import (AttnParams, STBlockParams, multi_head_attention,
                                   spatial_attention, st_transformer_block, temporal_attention)
from stmambasync.nn import grad_check, make_rng


def reference_mha(z, p):
    """Per-head loop with explicit softmax, written without the autodiff library."""
    d_k = p.d_h // p.heads
    q, k, v = (z @ m.weight.data + m.bias.data for m in (p.W_Q, p.W_K, p.W_V))
    heads = []
    for h in range(p.heads):
        sl = slice(h * d_k, (h + 1) * d_k)
        s = q[..., sl] @ np.swapaxes(k[..., sl], -1, -2) / np.sqrt(d_k)
        s = np.exp(s - s.max(axis=-1, keepdims=True))
        heads.append((s / s.sum(axis=-1, keepdims=True)) @ v[..., sl])
    return np.concatenate(heads, axis=-1) @ p.W_O.weight.data + p.W_O.bias.data


def test_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        AttnParams(10, 4, make_rng(0))


def test_mha_matches_per_head_reference():
    p = AttnParams(8, 2, make_rng(1))
    z = np.random.default_rng(2).standard_normal((3, 5, 8))
    np.testing.assert_allclose(multi_head_attention(z, p).data, reference_mha(z, p), atol=1e-13)


def test_attention_rows_sum_to_one():
    p = AttnParams(8, 4, make_rng(3))
    z = 5 * np.random.default_rng(4).standard_normal((6, 8))
    _, w = multi_head_attention(z, p, return_weights=True)
    assert w.shape == (4, 6, 6)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)


def test_single_frame_attention_returns_projected_values():
    p = AttnParams(8, 2, make_rng(5))
    z = np.random.default_rng(6).standard_normal((1, 8))
    out, w = multi_head_attention(z, p, return_weights=True)
    np.testing.assert_array_equal(w.data, 1.0)
    v = z @ p.W_V.weight.data + p.W_V.bias.data
    np.testing.assert_allclose(out.data, v @ p.W_O.weight.data + p.W_O.bias.data, atol=1e-14)


@pytest.mark.parametrize("fn", [temporal_attention, spatial_attention])
def test_shape_preserved_at_reference_size(fn):
    p = AttnParams(80, 4, make_rng(7))
    z = np.random.default_rng(8).standard_normal((12, 170, 80))
    assert fn(z, p).shape == (12, 170, 80)


def test_temporal_attention_is_node_separable():
    p = AttnParams(8, 2, make_rng(9))
    z = np.random.default_rng(10).standard_normal((5, 4, 8))
    base = temporal_attention(z, p).data
    z2 = z.copy()
    z2[:, 2] = 0.0
    out = temporal_attention(z2, p).data
    np.testing.assert_array_equal(np.delete(out, 2, axis=1), np.delete(base, 2, axis=1))
    assert not np.allclose(out[:, 2], base[:, 2])


def test_spatial_attention_is_frame_separable():
    p = AttnParams(8, 2, make_rng(11))
    z = np.random.default_rng(12).standard_normal((5, 4, 8))
    base = spatial_attention(z, p).data
    z2 = z.copy()
    z2[3] = 0.0
    out = spatial_attention(z2, p).data
    np.testing.assert_array_equal(np.delete(out, 3, axis=0), np.delete(base, 3, axis=0))


def test_spatial_attention_is_node_permutation_equivariant():
    p = AttnParams(8, 2, make_rng(13))
    z = np.random.default_rng(14).standard_normal((3, 6, 8))
    perm = np.array([4, 0, 5, 2, 1, 3])
    np.testing.assert_allclose(spatial_attention(z[:, perm], p).data,
                               spatial_attention(z, p).data[:, perm], atol=1e-13)


def test_cold_start_block_is_normalized_input():
    blk = STBlockParams(8, 2, make_rng(15))
    for a in (blk.temporal, blk.spatial):
        for m in (a.W_Q, a.W_K, a.W_V, a.W_O, a.ffn1, a.ffn2):
            m.weight.data[:] = 0.0
            m.bias.data[:] = 0.0
    z = np.random.default_rng(16).standard_normal((3, 4, 8))
    ln = z
    for _ in range(4):  # two post-norm sublayers, each normalising twice
        ln = (ln - ln.mean(-1, keepdims=True)) / np.sqrt(ln.var(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(st_transformer_block(z, blk).data, ln, atol=1e-12)


def test_block_finite_over_seeds():
    for seed in range(100):
        blk = STBlockParams(8, 2, make_rng(seed))
        z = np.random.default_rng(seed).standard_normal((3, 4, 8))
        assert np.all(np.isfinite(st_transformer_block(z, blk).data))


def key_biases(blk):
    return [blk.temporal.W_K.bias, blk.spatial.W_K.bias]


def test_block_gradients():
    blk = STBlockParams(8, 2, make_rng(17))
    z = T.Tensor(np.random.default_rng(18).standard_normal((3, 4, 8)), requires_grad=True)
    w = np.random.default_rng(19).standard_normal((3, 4, 8))
    shift_free = [q for q in blk.parameters() if all(q is not b for b in key_biases(blk))]
    assert grad_check(lambda: T.tsum(st_transformer_block(z, blk) * w), shift_free,
                      h=1e-4) < 1e-4
    assert grad_check(lambda t: T.tsum(st_transformer_block(t, blk) * w), z) < 1e-4


def test_key_bias_gradient_vanishes():
    # adding a constant to every key shifts each score row uniformly; softmax ignores it
    blk = STBlockParams(8, 2, make_rng(20))
    z = np.random.default_rng(21).standard_normal((3, 4, 8))
    w = np.random.default_rng(22).standard_normal((3, 4, 8))
    before = st_transformer_block(z, blk)
    T.tsum(before * w).backward()
    for b in key_biases(blk):
        assert np.abs(b.grad).max() < 1e-12
        b.data += 0.3
    assert np.abs(st_transformer_block(z, blk).data - before.data).max() < 1e-12
