"""Multi-modal fusion of word features with the vision feature map.

``SpatialDynamicFusion`` lets every pixel build its own language vector from
attention over the words; ``TileFusion`` copies the sentence vector to every
pixel (the baseline). All "convolutions" here are pointwise (1x1) linears.
"""

import math

import numpy as np

from .engine import broadcast_to, concat, matmul, relu, reshape, swapaxes
from .engine import functional as F
from .engine.nn import Conv2d, Linear, Module


class SpatialDynamicFusion(Module):
    def __init__(self, dim, rng):
        self.dim = dim
        self.vis_key = Linear(dim, dim, rng)
        self.word_key = Linear(dim, dim, rng, bias=False)  # a bias here cannot change the softmax
        self.word_value = Linear(dim, dim, rng)
        self.out = Linear(2 * dim, dim, rng)

    def attention(self, F_vr, F_t, pad_mask):
        """A_sd of shape (B, H, W, N_t): per-pixel softmax over real words."""
        b, h, w, c = F_vr.shape
        if F_t.shape[-1] != c:
            raise ValueError(f"channel mismatch: vision {c} vs language {F_t.shape[-1]}")
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if not pad_mask.any(axis=-1).all():
            raise ValueError("every word is padding; attention has no support")
        q = self.vis_key(F.flatten_spatial(F_vr))
        k = self.word_key(F_t)
        logits = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(self.dim))
        a = F.softmax(logits, axis=-1, mask=pad_mask[:, None, :])
        return reshape(a, (b, h, w, F_t.shape[1]))

    def fuse(self, A_sd, F_t, F_vr):
        """F_fused = Linear([A_sd · value(F_t) ; F_vr]) per pixel."""
        b, h, w, n_t = A_sd.shape
        if F_vr.shape[:3] != (b, h, w) or F_t.shape[1] != n_t:
            raise ValueError(f"shape mismatch: A_sd {A_sd.shape}, F_t {F_t.shape}, F_vr {F_vr.shape}")
        v = self.word_value(F_t)
        sdl = matmul(reshape(A_sd, (b, h * w, n_t)), v)
        fused = self.out(concat([sdl, F.flatten_spatial(F_vr)], axis=-1))
        return reshape(fused, (b, h, w, self.dim))

    def __call__(self, F_vr, lang):
        a = self.attention(F_vr, lang.F_t, lang.pad_mask)
        return self.fuse(a, lang.F_t, F_vr), a


class TileFusion(Module):
    """Sentence vector tiled over the map, concatenated, projected.

    ``extra_convs`` > 0 appends that many 3x3 conv + relu layers.
    """

    def __init__(self, dim, rng, extra_convs=0):
        self.dim = dim
        self.out = Linear(2 * dim, dim, rng)
        self.convs = [Conv2d(dim, dim, 3, rng) for _ in range(extra_convs)]

    def __call__(self, F_vr, lang):
        b, h, w, c = F_vr.shape
        sent = reshape(lang.sentence, (b, 1, 1, c))
        tiled = broadcast_to(sent, (b, h, w, c))
        x = self.out(concat([tiled, F_vr], axis=-1))
        for conv in self.convs:
            x = relu(conv(x))
        return x, None


def make_fusion(kind, dim, rng):
    if kind == "sdf":
        return SpatialDynamicFusion(dim, rng)
    if kind == "tile":
        return TileFusion(dim, rng)
    if kind == "tile_conv4":
        return TileFusion(dim, rng, extra_convs=4)
    raise ValueError(f"unknown fusion kind {kind!r} (expected sdf, tile, tile_conv4)")
