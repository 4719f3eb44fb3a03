"""Text and image feature extractors.

Both operate on a leading batch axis: token ids are (B, N_t), images are
(B, H_img, W_img, 3) with values in [0, 1].
"""

import re
from dataclasses import dataclass

import numpy as np

from .engine import Tensor, concat, relu, sigmoid, stack, tanh
from .engine import functional as F
from .engine.nn import Conv2d, Embedding, Linear, Module, Parameter, uniform_fan_in

PAD, UNK, MASKWORD = "<pad>", "<unk>", "<mask>"
_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text):
    """Lowercase and split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Token/id bijection; id 0 is padding, 1 unknown, 2 the mask word."""

    def __init__(self, tokens=()):
        self.itos = [PAD, UNK, MASKWORD]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    @property
    def pad_id(self):
        return 0

    @property
    def unk_id(self):
        return 1

    @property
    def mask_id(self):
        return 2

    def add(self, token):
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def encode(self, text_or_tokens):
        toks = tokenize(text_or_tokens) if isinstance(text_or_tokens, str) else text_or_tokens
        return [self.stoi.get(t, self.unk_id) for t in toks]

    def decode(self, ids):
        return [self.itos[i] for i in ids if i != self.pad_id]

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        while lines and lines[-1] == "":
            lines.pop()
        if lines[:3] != [PAD, UNK, MASKWORD]:
            raise ValueError(f"{path}: lines 0-2 must be {PAD!r}, {UNK!r}, {MASKWORD!r}")
        vocab = cls()
        for tok in lines[3:]:
            if tok in vocab:
                raise ValueError(f"{path}: duplicate token {tok!r}")
            vocab.add(tok)
        return vocab


def pad_ids(ids, n_t):
    """Truncate to the first ``n_t`` ids and right-pad with zeros."""
    if len(ids) == 0:
        raise ValueError("empty token list")
    ids = list(ids)[:n_t]
    return ids + [0] * (n_t - len(ids)), len(ids)


@dataclass
class LanguageFeatures:
    F_t: object  # Tensor (B, N_t, C)
    sentence: object  # Tensor (B, C)
    lengths: np.ndarray  # (B,)
    pad_mask: np.ndarray  # (B, N_t), True on real words


class GRUDirection(Module):
    def __init__(self, d_in, hidden, rng):
        self.hidden = hidden
        self.w_x = Parameter(uniform_fan_in(rng, (d_in, 3 * hidden), hidden))
        self.w_h = Parameter(uniform_fan_in(rng, (hidden, 3 * hidden), hidden))
        self.b_x = Parameter(np.zeros(3 * hidden))
        self.b_h = Parameter(np.zeros(3 * hidden))

    def run(self, x, valid, reverse=False):
        """Returns per-step states (list, time order) and the final state.

        ``valid`` is (B, T); invalid steps carry the previous state forward.
        """
        b, t_len, _ = x.shape
        hsz = self.hidden
        xp = F.linear(x, self.w_x, self.b_x)
        h = F.constant(np.zeros((b, hsz)))
        states = [None] * t_len
        order = range(t_len - 1, -1, -1) if reverse else range(t_len)
        for t in order:
            xt = xp[:, t, :]
            hp = F.linear(h, self.w_h, self.b_h)
            z = sigmoid(xt[:, :hsz] + hp[:, :hsz])
            r = sigmoid(xt[:, hsz : 2 * hsz] + hp[:, hsz : 2 * hsz])
            n = tanh(xt[:, 2 * hsz :] + r * hp[:, 2 * hsz :])
            h_new = n + z * (h - n)
            m = valid[:, t : t + 1]
            if m.all():
                h = h_new
            else:
                h = h + F.constant(m.astype(np.float64)) * (h_new - h)
            states[t] = h
        return states, h


class TextEncoder(Module):
    """Word embeddings followed by one bidirectional gated recurrent layer."""

    def __init__(self, vocab_size, dim, n_t, rng):
        self.n_t = n_t
        self.embed = Embedding(vocab_size, dim, rng)
        self.fwd = GRUDirection(dim, dim, rng)
        self.bwd = GRUDirection(dim, dim, rng)
        self.word_proj = Linear(2 * dim, dim, rng)
        self.sent_proj = Linear(2 * dim, dim, rng)

    def __call__(self, token_ids, lengths):
        ids = np.asarray(token_ids, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] != self.n_t:
            raise ValueError(f"token ids must be (B, {self.n_t}), got {ids.shape}")
        if (lengths < 1).any():
            raise ValueError("empty token list")
        valid = np.arange(self.n_t)[None, :] < lengths[:, None]
        emb = self.embed(ids)
        fw_states, fw_last = self.fwd.run(emb, valid)
        bw_states, bw_last = self.bwd.run(emb, valid, reverse=True)
        both = concat([stack(fw_states, axis=1), stack(bw_states, axis=1)], axis=-1)
        words = self.word_proj(both) * F.constant(valid[:, :, None].astype(np.float64))
        sentence = self.sent_proj(concat([fw_last, bw_last], axis=-1))
        return LanguageFeatures(words, sentence, lengths, valid)


class ImageEncoder(Module):
    """Three stride-2 3x3 conv stages; all three outputs summed at the coarsest size."""

    stride = 8

    def __init__(self, dim, rng, channels=(16, 32)):
        c1, c2 = channels
        self.stage1 = Conv2d(3, c1, 3, rng, stride=2)
        self.stage2 = Conv2d(c1, c2, 3, rng, stride=2)
        self.stage3 = Conv2d(c2, dim, 3, rng, stride=2)
        self.proj1 = Linear(c1, dim, rng)
        self.proj2 = Linear(c2, dim, rng)
        self.proj3 = Linear(dim, dim, rng)

    def __call__(self, images):
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ValueError(f"images must be (B, H, W, 3), got {x.shape}")
        h, w = x.shape[1:3]
        if h % self.stride or w % self.stride:
            raise ValueError(
                f"image size {h}x{w} must be a multiple of {self.stride} (total stride)"
            )
        s1 = relu(self.stage1(x))
        s2 = relu(self.stage2(s1))
        s3 = relu(self.stage3(s2))
        size = (h // self.stride, w // self.stride)
        return (
            self.proj1(F.resize_nearest(s1, size))
            + self.proj2(F.resize_nearest(s2, size))
            + self.proj3(s3)
        )
