"""The assembled vision-language transformer."""

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .decode import MaskDecoder, QueryBalance
from .encoders import ImageEncoder, TextEncoder
from .engine import functional as F
from .engine import reshape
from .engine.nn import Module
from .fusion import make_fusion
from .query import LearntQueries, QueryGenerator, WordQueries
from .transformer import TransformerDecoder, TransformerEncoder, sine_position_table


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    dim: int = 256
    heads: int = 8
    n_q: int = 16
    n_t: int = 15
    layers_enc: int = 2
    layers_dec: int = 2
    ffn_mult: int = 4
    fusion: str = "sdf"
    query_kind: str = "qgm"
    share_wv: bool = True
    use_pos: bool = True
    pos_per_layer: bool = False
    qbm: bool = True
    cnn_channels: tuple = (16, 32)
    ln_eps: float = 1e-5

    @classmethod
    def desk(cls, **overrides):
        """Small configuration that trains on one CPU core."""
        return replace(cls(dim=32, heads=2), **overrides)

    @property
    def feature_size(self):
        return self.image_size // ImageEncoder.stride

    @property
    def n_queries(self):
        """Decoder query count; the word-feature baseline uses N_t + 1."""
        return self.n_t + 1 if self.query_kind == "ft" else self.n_q

    def to_dict(self):
        d = asdict(self)
        d["cnn_channels"] = list(self.cnn_channels)
        return d

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class VLTOutput:
    logits: object  # Tensor (B, S, S)
    F_m: object  # Tensor (B, HW, N_q)
    A_qd: object  # Tensor (B, N_q, N_t) or None
    A_sd: object  # Tensor (B, H, W, N_t) or None
    C_q: object  # Tensor (B, N_q, 1) or None
    F_vq: object = None
    extras: dict = field(default_factory=dict)

    def features(self, kind="pooled"):
        """Contrastive feature per sample: F_m averaged over positions, or flattened."""
        if kind == "pooled":
            return self.F_m.mean(axis=1)
        if kind == "flat":
            b = self.F_m.shape[0]
            return reshape(self.F_m, (b, -1))
        raise ValueError(f"unknown contrastive feature kind {kind!r}")


class VLT(Module):
    def __init__(self, config, vocab_size, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        s = c.feature_size
        self.text = TextEncoder(vocab_size, c.dim, c.n_t, rng)
        self.image = ImageEncoder(c.dim, rng, channels=tuple(c.cnn_channels))
        self.fusion = make_fusion(c.fusion, c.dim, rng)
        if c.query_kind == "qgm":
            self.queries = QueryGenerator(c.dim, c.n_q, s * s, rng, share_wv=c.share_wv)
        elif c.query_kind == "learnt":
            self.queries = LearntQueries(c.dim, c.n_q, rng)
        elif c.query_kind == "ft":
            self.queries = WordQueries(c.n_t)
        else:
            raise ValueError(f"unknown query kind {c.query_kind!r} (expected qgm, learnt, ft)")
        self.encoder = TransformerEncoder(
            c.dim, c.heads, c.layers_enc, rng, c.ffn_mult, c.ln_eps, pos_per_layer=c.pos_per_layer
        )
        self.decoder = TransformerDecoder(c.dim, c.heads, c.layers_dec, rng, c.ffn_mult, c.ln_eps)
        self.balance = QueryBalance(c.dim, rng) if c.qbm else None
        self.mask_decoder = MaskDecoder(c.n_queries, rng)
        self.pos = sine_position_table(s, s, c.dim) if c.use_pos else None

    def language(self, token_ids, lengths):
        return self.text(token_ids, lengths)

    def query_attention(self, images, token_ids, lengths):
        """Only the encoders and query generator; returns (A_qd, F_vq) as tensors."""
        if self.config.query_kind != "qgm":
            raise ValueError("query attention needs query_kind=qgm")
        lang = self.text(token_ids, lengths)
        f_vr = self.image(images)
        vq = self.queries.vision_queries(f_vr)
        return self.queries.attention(vq, lang.F_t, lang.pad_mask), vq

    def __call__(self, images, token_ids, lengths):
        lang = self.text(token_ids, lengths)
        f_vr = self.image(images)
        fused, a_sd = self.fusion(f_vr, lang)
        b, h, w, _ = fused.shape
        mem = self.encoder(F.flatten_spatial(fused), self.pos)
        qs = self.queries(f_vr, lang)
        f_r = self.decoder(qs.F_q, mem)
        if self.balance is not None:
            c_q, f_b = self.balance(qs.F_q, f_r)
        else:
            c_q, f_b = None, f_r
        logits, f_m = self.mask_decoder(f_b, mem, (h, w))
        return VLTOutput(logits, f_m, qs.A_qd, a_sd, c_q, qs.F_vq, {"F_mem": mem, "F_r": f_r})
