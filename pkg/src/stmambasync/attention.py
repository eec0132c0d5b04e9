"""Temporal and spatial multi-head self-attention (the ST-Transformer block)."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import LinearMap, NormParams, Parameter, split_rng
from .tensor import Tensor


class AttnParams:
    """One post-norm transformer sublayer: attention + ReLU feed-forward.

    ``W_Q``, ``W_K`` and ``W_V`` map ``d_h -> d_h``; head ``i`` uses output
    columns ``[i*d_k, (i+1)*d_k)``.
    """

    def __init__(self, d_h: int, heads: int, rng, name: str = "attn"):
        if d_h % heads:
            raise ValueError(f"d_h={d_h} is not divisible by heads={heads}")
        r = split_rng(rng, 6)
        self.d_h, self.heads = d_h, heads
        self.W_Q = LinearMap(d_h, d_h, r[0], name=f"{name}.W_Q")
        self.W_K = LinearMap(d_h, d_h, r[1], name=f"{name}.W_K")
        self.W_V = LinearMap(d_h, d_h, r[2], name=f"{name}.W_V")
        self.W_O = LinearMap(d_h, d_h, r[3], name=f"{name}.W_O")
        self.ffn1 = LinearMap(d_h, 4 * d_h, r[4], name=f"{name}.ffn1")
        self.ffn2 = LinearMap(4 * d_h, d_h, r[5], name=f"{name}.ffn2")
        self.norm1 = NormParams(d_h, f"{name}.norm1")
        self.norm2 = NormParams(d_h, f"{name}.norm2")

    def parameters(self) -> list[Parameter]:
        out = []
        for m in (self.W_Q, self.W_K, self.W_V, self.W_O, self.ffn1, self.ffn2,
                  self.norm1, self.norm2):
            out.extend(m.parameters())
        return out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, L, d = x.shape
    return x.reshape(*lead, L, heads, d // heads).swapaxes(-2, -3)


def multi_head_attention(z: Tensor, p: AttnParams, return_weights: bool = False):
    """Scaled dot-product attention across the second-to-last axis of ``z``.

    Returns the output-projected attention result (before residual and
    normalisation), and optionally the ``(..., heads, L, L)`` weights.
    """
    z = T.ensure_tensor(z)
    d_k = p.d_h // p.heads
    q = _split_heads(p.W_Q(z), p.heads)
    k = _split_heads(p.W_K(z), p.heads)
    v = _split_heads(p.W_V(z), p.heads)
    w = T.softmax((q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d_k)), axis=-1)
    o = (w @ v).swapaxes(-2, -3)
    o = o.reshape(*o.shape[:-2], p.d_h)
    out = p.W_O(o)
    return (out, w) if return_weights else out


def attention_sublayer(z: Tensor, p: AttnParams) -> Tensor:
    """Attention, residual, norm, feed-forward, residual, norm (over axis -2)."""
    z = T.ensure_tensor(z)
    h = p.norm1(z + multi_head_attention(z, p))
    f = p.ffn2(T.relu(p.ffn1(h)))
    return p.norm2(h + f)


def temporal_attention(z, p: AttnParams) -> Tensor:
    """Attend over frames separately for each node of a ``(..., T, N, d_h)`` input."""
    z = T.ensure_tensor(z)
    return attention_sublayer(z.swapaxes(-2, -3), p).swapaxes(-2, -3)


def spatial_attention(z, p: AttnParams) -> Tensor:
    """Attend over nodes separately for each frame of a ``(..., T, N, d_h)`` input."""
    return attention_sublayer(T.ensure_tensor(z), p)


class STBlockParams:
    def __init__(self, d_h: int, heads: int, rng, name: str = "st"):
        r = split_rng(rng, 2)
        self.temporal = AttnParams(d_h, heads, r[0], f"{name}.temporal")
        self.spatial = AttnParams(d_h, heads, r[1], f"{name}.spatial")

    def parameters(self) -> list[Parameter]:
        return self.temporal.parameters() + self.spatial.parameters()


def st_transformer_block(z, p: STBlockParams) -> Tensor:
    return spatial_attention(temporal_attention(z, p.temporal), p.spatial)
