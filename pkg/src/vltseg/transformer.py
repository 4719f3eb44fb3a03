"""Post-norm transformer encoder/decoder and the fixed 2-D sine position table."""

import math

import numpy as np

from .engine import matmul, relu, reshape, swapaxes
from .engine import functional as F
from .engine.nn import LayerNorm, Linear, Module


def sine_position_table(h, w, dim, temperature=10000.0):
    """(H*W, dim) table: first half of the channels encodes the row, second half the column.

    Within each half, channel pairs (2i, 2i+1) hold sin/cos of ``pos / T**(2i/half)``.
    """
    if dim % 4:
        raise ValueError(f"positional embedding needs dim divisible by 4, got {dim}")
    half = dim // 2
    freqs = temperature ** (-np.arange(0, half, 2) / half)
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")

    def encode(pos):
        ang = pos.reshape(-1, 1) * freqs[None, :]
        out = np.empty((pos.size, half))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    return np.concatenate([encode(rows), encode(cols)], axis=1)


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng):
        if dim % heads:
            raise ValueError(f"dim {dim} is not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng)
        # a key bias shifts every logit of a row equally, so it is left out
        self.k_proj = Linear(dim, dim, rng, bias=False)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)
        self.last_weights = None

    def _split(self, x):
        b, n, _ = x.shape
        d = self.dim // self.heads
        return swapaxes(reshape(x, (b, n, self.heads, d)), 1, 2)

    def __call__(self, q, k, v):
        """q (B, n_q, C), k/v (B, n_k, C) -> (B, n_q, C).

        The attention weights (B, heads, n_q, n_k) are kept in ``last_weights``.
        """
        b, n_q, _ = q.shape
        d = self.dim // self.heads
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        vh = self._split(self.v_proj(v))
        scores = matmul(qh, swapaxes(kh, -1, -2)) * (1.0 / math.sqrt(d))
        weights = F.softmax(scores, axis=-1)
        self.last_weights = weights
        ctx = matmul(weights, vh)
        ctx = reshape(swapaxes(ctx, 1, 2), (b, n_q, self.dim))
        return self.out_proj(ctx)


class FeedForward(Module):
    def __init__(self, dim, hidden, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x):
        return self.fc2(relu(self.fc1(x)))


class EncoderLayer(Module):
    def __init__(self, dim, heads, ffn, rng, eps=1e-5):
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim, eps)
        self.ffn = FeedForward(dim, ffn, rng)
        self.norm2 = LayerNorm(dim, eps)

    def __call__(self, x, pos=None):
        qk = x if pos is None else x + pos
        x = self.norm1(x + self.attn(qk, qk, x))
        return self.norm2(x + self.ffn(x))


class DecoderLayer(Module):
    def __init__(self, dim, heads, ffn, rng, eps=1e-5):
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim, eps)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim, eps)
        self.ffn = FeedForward(dim, ffn, rng)
        self.norm3 = LayerNorm(dim, eps)

    def __call__(self, q, mem):
        q = self.norm1(q + self.self_attn(q, q, q))
        q = self.norm2(q + self.cross_attn(q, mem, mem))
        return self.norm3(q + self.ffn(q))


class TransformerEncoder(Module):
    """Stack of encoder layers.

    With ``pos_per_layer`` the position table is added to queries and keys in
    every layer; otherwise it is added once to the input.
    """

    def __init__(self, dim, heads, layers, rng, ffn_mult=4, eps=1e-5, pos_per_layer=False):
        self.pos_per_layer = pos_per_layer
        self.layers = [EncoderLayer(dim, heads, ffn_mult * dim, rng, eps) for _ in range(layers)]

    def __call__(self, x, pos=None):
        if pos is not None:
            pos = F.constant(pos)
            if not self.pos_per_layer:
                x = x + pos
        for layer in self.layers:
            x = layer(x, pos if self.pos_per_layer else None)
        return x


class TransformerDecoder(Module):
    """Each query row attends to the other queries, so rows are not independent."""

    def __init__(self, dim, heads, layers, rng, ffn_mult=4, eps=1e-5):
        self.layers = [DecoderLayer(dim, heads, ffn_mult * dim, rng, eps) for _ in range(layers)]

    def __call__(self, queries, mem):
        for layer in self.layers:
            queries = layer(queries, mem)
        return queries
