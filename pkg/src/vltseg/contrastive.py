"""Batch relationships, probability-guided word masking and the contrastive loss."""

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor, exp, log, stack
from .engine import functional as F


class RelationshipTag(enum.Enum):
    SISO = "SISO"  # same image, same object, other expression
    SIDO = "SIDO"  # same image, different object
    DI = "DI"  # different image


def relationship(initial, other):
    if other.image_id != initial.image_id:
        return RelationshipTag.DI
    if other.object_id != initial.object_id:
        return RelationshipTag.SIDO
    return RelationshipTag.SISO


def sido_cap(batch_size, fraction=0.1):
    return int(math.floor(fraction * batch_size))


@dataclass
class TrainingBatch:
    initial: int  # dataset index of the initial sample
    members: list  # [(dataset index, RelationshipTag)], initial first with tag None
    masked: list = field(default_factory=list)  # [(member position, masked token ids)]

    def __len__(self):
        return len(self.members)

    def indices(self):
        return [i for i, _ in self.members]

    def tags(self):
        return [t for _, t in self.members]

    def positions(self, tag):
        return [p for p, (_, t) in enumerate(self.members) if t is tag]


def build_batch(dataset, initial, batch_size, n_so=None, n_do=None, rng=None):
    """Initial sample, then SISO partners, then SIDO, then DI.

    ``n_so=None`` takes every other expression of the object; ``n_do=None``
    uses 10% of the batch size. DI slots that cannot be filled (single-image
    data) fall back to extra SIDO, then SISO picks with replacement.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    n_do = sido_cap(batch_size) if n_do is None else n_do
    s0 = dataset.samples[initial]
    siso = [i for i in dataset.indices_for_object(s0.image_id, s0.object_id) if i != initial]
    sido = [i for i in dataset.indices_for_image(s0.image_id) if dataset.samples[i].object_id != s0.object_id]
    want_so = len(siso) if n_so is None else min(n_so, len(siso))
    if n_so is not None and batch_size < 1 + want_so:
        raise ValueError(f"batch_size {batch_size} cannot hold the initial sample and {want_so} SISO picks")
    want_so = min(want_so, batch_size - 1)
    members = [(initial, None)]
    if want_so:
        picks = rng.choice(len(siso), size=want_so, replace=False)
        members += [(siso[int(p)], RelationshipTag.SISO) for p in sorted(picks)]
    want_do = min(n_do, len(sido), batch_size - len(members))
    if want_do > 0:
        picks = rng.choice(len(sido), size=want_do, replace=False)
        members += [(sido[int(p)], RelationshipTag.SIDO) for p in sorted(picks)]
    others = [i for i in dataset.image_ids() if i != s0.image_id]
    while len(members) < batch_size and others:
        image_id = others[int(rng.integers(len(others)))]
        pool = dataset.indices_for_image(image_id)
        if pool:
            members.append((pool[int(rng.integers(len(pool)))], RelationshipTag.DI))
    # degenerate data: no other image to draw from
    if len(members) < batch_size:
        used = {i for i, _ in members}
        spare = [i for i in sido if i not in used]
        rng.shuffle(spare)
        for i in spare[: batch_size - len(members)]:
            members.append((i, RelationshipTag.SIDO))
    while len(members) < batch_size:
        pool = siso or [initial]
        i = pool[int(rng.integers(len(pool)))]
        members.append((i, RelationshipTag.SISO))
    return TrainingBatch(initial, members)


def p_m(a, valid):
    """Masking distribution: softmax of word importances over valid words only."""
    a = np.asarray(a, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("no valid words")
    z = np.where(valid, a, -np.inf)
    e = np.where(valid, np.exp(z - z[valid].max()), 0.0)
    return e / e.sum()


def mask_expression(token_ids, a, n_m, rng, mask_id=2):
    """Replace one word, drawn from p_m, by the mask token.

    ``a`` holds per-word importances for the unmasked sentence (padding
    entries ignored). Sentences of ``n_m`` words or fewer come back unchanged
    with flag False.
    """
    ids = list(token_ids)
    n = len(ids)
    if n <= n_m:
        return ids, False
    a = np.asarray(a, dtype=np.float64)[:n]
    probs = p_m(a, np.ones(n, dtype=bool))
    j = int(rng.choice(n, p=probs))
    ids[j] = mask_id
    return ids, True


def _as_rows(xs):
    if isinstance(xs, Tensor):
        return xs if xs.ndim == 2 else xs.reshape((1, -1))
    xs = list(xs)
    if not xs:
        return None
    return stack([x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64)) for x in xs], axis=0)


def contrastive_loss(f_init, positives, negatives, tau=0.1, denominator="current"):
    """InfoNCE over cosine similarities to ``f_init``.

    Each positive's denominator holds every negative plus that positive
    (``denominator="current"``) or plus all positives (``"all"``). Returns
    None when there are no positives.
    """
    if denominator not in ("current", "all"):
        raise ValueError(f"denominator must be 'current' or 'all', got {denominator!r}")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    f0 = f_init if isinstance(f_init, Tensor) else Tensor(np.asarray(f_init, dtype=np.float64))
    pos = _as_rows(positives)
    if pos is None or pos.shape[0] == 0:
        return None
    neg = _as_rows(negatives) if negatives is not None else None
    if neg is not None and neg.shape[0] == 0:
        neg = None
    # cos <= 1, so shifting by 1/tau keeps every exponent <= 0
    shift = 1.0 / tau
    s_pos = F.cosine_similarity(pos, f0.reshape((1, -1))) * (1.0 / tau)
    e_pos = exp(s_pos - shift)
    if neg is not None:
        s_neg = F.cosine_similarity(neg, f0.reshape((1, -1))) * (1.0 / tau)
        neg_sum = exp(s_neg - shift).sum()
    else:
        neg_sum = 0.0
    if denominator == "current":
        denom = e_pos + neg_sum
    else:
        denom = e_pos.sum() + neg_sum
    return (log(denom) - (s_pos - shift)).mean()
