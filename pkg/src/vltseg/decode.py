"""Query balancing, mask decoding and the segmentation loss."""

from dataclasses import dataclass

import numpy as np

from .engine import concat, matmul, relu, reshape, sigmoid, swapaxes
from .engine import functional as F
from .engine.nn import Conv2d, Linear, Module

MASK_THRESHOLD = 0.5


class QueryBalance(Module):
    """Confidence C_q in (0, 1) per query; balanced responses F_b = C_q * F_r."""

    def __init__(self, dim, rng):
        self.query_proj = Linear(dim, dim, rng)
        self.fc1 = Linear(2 * dim, dim, rng)
        self.fc2 = Linear(dim, 1, rng)

    def confidence(self, F_q, F_r):
        if F_q.shape != F_r.shape:
            raise ValueError(f"queries {F_q.shape} and responses {F_r.shape} differ")
        x = concat([self.query_proj(F_q), F_r], axis=-1)
        return sigmoid(self.fc2(relu(self.fc1(x))))

    def __call__(self, F_q, F_r):
        c = self.confidence(F_q, F_r)
        return c, F_r * c


class MaskDecoder(Module):
    """F_m = F_ve F_b^T, then three (3x3 conv, relu, 2x upsample) blocks and a 1x1 conv.

    Channel widths: n_q -> n_q -> n_q/2 -> n_q/2 -> 1. Consumes only F_b and
    the encoder memory.
    """

    def __init__(self, n_q, rng):
        half = max(1, n_q // 2)
        self.n_q = n_q
        self.conv1 = Conv2d(n_q, n_q, 3, rng)
        self.conv2 = Conv2d(n_q, half, 3, rng)
        self.conv3 = Conv2d(half, half, 3, rng)
        self.head = Linear(half, 1, rng)

    @staticmethod
    def kernel_features(F_b, F_ve):
        """F_m (B, HW, N_q) = F_ve (B, HW, C) @ F_b^T."""
        if F_b.shape[-1] != F_ve.shape[-1]:
            raise ValueError(f"channel mismatch: F_b {F_b.shape} vs F_ve {F_ve.shape}")
        return matmul(F_ve, swapaxes(F_b, -1, -2))

    def __call__(self, F_b, F_ve, hw):
        h, w = hw
        f_m = self.kernel_features(F_b, F_ve)
        b = f_m.shape[0]
        x = reshape(f_m, (b, h, w, f_m.shape[-1]))
        for conv in (self.conv1, self.conv2, self.conv3):
            x = F.upsample2x(relu(conv(x)))
        logits = self.head(x)
        return reshape(logits, (b, 8 * h, 8 * w)), f_m


@dataclass
class MaskPrediction:
    logits: np.ndarray
    threshold: float = MASK_THRESHOLD

    @property
    def probabilities(self):
        x = self.logits
        e = np.exp(-np.abs(x))
        return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    @property
    def binary(self):
        return self.probabilities > self.threshold


def resize_mask_nearest(mask, size):
    """Nearest-neighbour resize of a (..., H, W) array to ``size``."""
    mask = np.asarray(mask)
    h, w = mask.shape[-2:]
    ho, wo = size
    if (h, w) == (ho, wo):
        return mask
    ri = (np.arange(ho) * h) // ho
    ci = (np.arange(wo) * w) // wo
    return mask[..., ri, :][..., :, ci]


def bce_loss(logits, target):
    """Mean per-pixel binary cross-entropy on logits; target is resized to the logits."""
    target = np.asarray(target, dtype=np.float64)
    if not np.isin(target, (0.0, 1.0)).all():
        raise ValueError("target mask must contain only 0 and 1")
    target = resize_mask_nearest(target, logits.shape[-2:])
    if target.shape != logits.shape:
        target = np.broadcast_to(target, logits.shape)
    return F.bce_with_logits(logits, target)
