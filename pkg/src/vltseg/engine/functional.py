"""Composite and fused differentiable operations built on :mod:`.tensor`."""

import numpy as np

from .tensor import ShapeError, Tensor, _make, as_tensor, matmul, reshape


def softmax(x, axis=-1, mask=None):
    """Softmax along ``axis`` with the per-slice maximum subtracted first.

    ``mask`` (bool, broadcastable to ``x``) marks the entries that take part;
    masked entries behave as ``-inf`` logits and get exactly zero weight.
    """
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax: a slice has no unmasked entries")
        shifted = np.where(mask, xd, -np.inf)
    else:
        shifted = xd
    m = shifted.max(axis=axis, keepdims=True)
    e = np.exp(shifted - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    xd = x.data
    n = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dg = (g * xhat).sum(axis=lead)
        db = g.sum(axis=lead)
        dxhat = g * gd
        dx = inv / n * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, dg, db

    return _make(out, (x, gamma, beta), bw)


def bce_with_logits(logits, target):
    """Mean binary cross-entropy, evaluated as ``max(x,0) - x t + log1p(e^-|x|)``."""
    x = logits.data
    t = np.asarray(target, dtype=np.float64)
    if t.shape != x.shape:
        raise ShapeError(f"bce: logits {x.shape} vs target {t.shape}")
    n = x.size
    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        return ((sig - t) * (g / n),)

    return _make(np.asarray(per.sum() / n), (logits,), bw)


def im2col(x, k, stride=1, pad=0):
    """Unfold (B, H, W, C) patches into (B, Ho, Wo, k*k*C), ordered (di, dj, c)."""
    b, h, w, c = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    cols = np.empty((b, ho, wo, k, k, c))
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, di, dj, :] = xp[
                :, di : di + stride * ho : stride, dj : dj + stride * wo : stride, :
            ]

    def bw(g):
        g = g.reshape(b, ho, wo, k, k, c)
        gp = np.zeros((b, h + 2 * pad, w + 2 * pad, c))
        for di in range(k):
            for dj in range(k):
                gp[:, di : di + stride * ho : stride, dj : dj + stride * wo : stride, :] += g[
                    :, :, :, di, dj, :
                ]
        return (gp[:, pad : pad + h, pad : pad + w, :] if pad else gp,)

    return _make(cols.reshape(b, ho, wo, k * k * c), (x,), bw)


def conv2d(x, weight, bias=None, k=3, stride=1, pad=None):
    """Channel-last convolution; ``weight`` is (k*k*C_in, C_out)."""
    if pad is None:
        pad = k // 2
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (B, H, W, C), got {x.shape}")
    if weight.shape[0] != k * k * x.shape[-1]:
        raise ShapeError(
            f"conv2d weight {weight.shape} does not match {k}x{k} kernel on {x.shape[-1]} channels"
        )
    cols = im2col(x, k, stride, pad) if k > 1 or stride > 1 else x
    out = matmul(cols, weight)
    if bias is not None:
        out = out + bias
    return out


def upsample2x(x):
    """Nearest-neighbour 2x upsampling of (B, H, W, C)."""
    b, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _make(out, (x,), lambda g: (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),))


def resize_nearest(x, size):
    """Nearest-neighbour resize of (B, H, W, C) to ``size`` = (Ho, Wo).

    Source index for output ``i`` is ``floor(i * H / Ho)``.
    """
    b, h, w, c = x.shape
    ho, wo = size
    if (ho, wo) == (h, w):
        return x
    ri = (np.arange(ho) * h) // ho
    ci = (np.arange(wo) * w) // wo
    out = x.data[:, ri][:, :, ci]

    def bw(g):
        full = np.zeros((b, h, w, c))
        np.add.at(full, (slice(None), ri[:, None], ci[None, :]), g)
        return (full,)

    return _make(out, (x,), bw)


def embedding(weight, ids):
    """Row lookup ``weight[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = weight.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return _make(weight.data[ids], (weight,), bw)


def cosine_similarity(a, b, axis=-1):
    """Cosine similarity along ``axis``; zero-norm inputs raise."""
    from .tensor import sqrt

    na2 = (a * a).sum(axis=axis)
    nb2 = (b * b).sum(axis=axis)
    if (na2.data <= 0).any() or (nb2.data <= 0).any():
        raise ValueError("cosine similarity of a zero-norm vector is undefined")
    return (a * b).sum(axis=axis) / sqrt(na2 * nb2)


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def constant(x):
    return Tensor(x)


def flatten_spatial(x):
    """(B, H, W, C) -> (B, H*W, C)."""
    b, h, w, c = x.shape
    return reshape(x, (b, h * w, c))
