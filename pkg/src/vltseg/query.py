"""Input-specific query generation for the transformer decoder.

Each of the ``n_q`` queries is a word-attention-weighted language vector, with
the attention guided by one channel of the vision map.
"""

import math
from dataclasses import dataclass

import numpy as np

from .engine import Tensor, broadcast_to, concat, matmul, relu, reshape, swapaxes
from .engine import functional as F
from .engine.nn import Linear, Module, Parameter, uniform_fan_in


@dataclass
class QuerySet:
    F_q: object  # (B, N_q, C)
    A_qd: object  # (B, N_q, N_t) or None for the ablation baselines
    F_vq: object  # (B, N_q, HW) or None


class QueryGenerator(Module):
    def __init__(self, dim, n_q, hw, rng, share_wv=True):
        self.dim = dim
        self.n_q = n_q
        self.share_wv = share_wv
        self.reduce1 = Linear(dim, dim, rng)
        self.reduce2 = Linear(dim, dim, rng)
        self.reduce3 = Linear(dim, n_q, rng)
        self.w_v = Parameter(uniform_fan_in(rng, (hw, dim), hw))
        self.w_a = Parameter(uniform_fan_in(rng, (dim, dim), dim))
        self.w_t = Parameter(uniform_fan_in(rng, (dim, dim), dim))
        # second vision matrix for the residual path, only when untied
        self.w_v_res = None if share_wv else Parameter(uniform_fan_in(rng, (hw, dim), hw))

    def vision_queries(self, F_vr):
        """(B, H, W, C) -> F_vq of shape (B, N_q, H*W)."""
        x = F.flatten_spatial(F_vr)
        x = relu(self.reduce1(x))
        x = relu(self.reduce2(x))
        x = self.reduce3(x)
        return swapaxes(x, -1, -2)

    def attention(self, F_vq, F_t, pad_mask):
        """A_qd (B, N_q, N_t): softmax over real words of relu(F_vq W_v) relu(F_t W_a)^T / sqrt(C)."""
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if not pad_mask.any(axis=-1).all():
            raise ValueError("no valid words to attend to")
        vis = relu(matmul(F_vq, self.w_v))
        lang = relu(matmul(F_t, self.w_a))
        logits = matmul(vis, swapaxes(lang, -1, -2)) * (1.0 / math.sqrt(self.dim))
        return F.softmax(logits, axis=-1, mask=pad_mask[:, None, :])

    def generate(self, F_vq, F_t, A_qd):
        """F_q = A_qd relu(F_t W_t) + relu(F_vq W_v)."""
        w_res = self.w_v if self.w_v_res is None else self.w_v_res
        return matmul(A_qd, relu(matmul(F_t, self.w_t))) + relu(matmul(F_vq, w_res))

    def __call__(self, F_vr, lang):
        vq = self.vision_queries(F_vr)
        a = self.attention(vq, lang.F_t, lang.pad_mask)
        return QuerySet(self.generate(vq, lang.F_t, a), a, vq)


class LearntQueries(Module):
    """Fixed learned query vectors (ablation baseline)."""

    def __init__(self, dim, n_q, rng):
        self.n_q = n_q
        self.queries = Parameter(rng.uniform(-1.0, 1.0, size=(n_q, dim)))

    def __call__(self, F_vr, lang):
        b = F_vr.shape[0]
        q = broadcast_to(reshape(self.queries, (1,) + self.queries.shape), (b,) + self.queries.shape)
        return QuerySet(q, None, None)


class WordQueries(Module):
    """Per-word features plus the sentence feature used directly as queries."""

    def __init__(self, n_t):
        self.n_q = n_t + 1

    def __call__(self, F_vr, lang):
        b, _, c = lang.F_t.shape
        q = concat([lang.F_t, reshape(lang.sentence, (b, 1, c))], axis=1)
        return QuerySet(q, None, None)


def global_word_importance(A_qd):
    """a_i = sum over queries of A_qd[:, :, i]; shape (B, N_t). Accepts arrays or tensors."""
    a = A_qd.data if isinstance(A_qd, Tensor) else np.asarray(A_qd)
    return a.sum(axis=-2)


def query_spatial_maps(F_vq, h, w):
    """Reshape F_vq (B, N_q, HW) into per-query maps (B, N_q, H, W)."""
    data = F_vq.data if isinstance(F_vq, Tensor) else np.asarray(F_vq)
    return data.reshape(data.shape[0], data.shape[1], h, w)

