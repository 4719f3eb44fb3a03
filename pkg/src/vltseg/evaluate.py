"""Model evaluation over a dataset, optionally with the top-importance word erased."""

import numpy as np

from .decode import MaskPrediction
from .engine import no_grad, reset_tape
from .metrics import EvalReport, iou
from .train import word_importance


def sample_key(s):
    return f"{s.image_id:05d}-{s.object_id}-{s.expression_id}"


def erase_top_word(token_ids, a, n_m, mask_id):
    """Mask the highest-importance word of sentences longer than ``n_m`` (first on ties)."""
    ids = list(token_ids)
    if len(ids) <= n_m:
        return ids, False
    ids[int(np.argmax(np.asarray(a)[: len(ids)]))] = mask_id
    return ids, True


def predict(model, dataset, samples, overrides=None):
    images, ids, lengths, targets = dataset.collate(samples, model.config.n_t, overrides)
    with no_grad():
        out = model(images, ids, lengths)
    reset_tape()
    return MaskPrediction(out.logits.data), targets


def evaluate(model, dataset, batch_size=32, mask_eval=False, n_m=3, seed=0, samples=None):
    samples = dataset.samples if samples is None else samples
    keys, ious, n_masked = [], [], 0
    mask_id = dataset.vocab.mask_id
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        overrides = None
        if mask_eval:
            images, ids, lengths, _ = dataset.collate(chunk, model.config.n_t)
            a = word_importance(model, images, ids, lengths)
            overrides = {}
            for row in range(len(chunk)):
                masked, ok = erase_top_word(ids[row, : lengths[row]], a[row], n_m, mask_id)
                if ok:
                    overrides[row] = masked
                    n_masked += 1
        pred, targets = predict(model, dataset, chunk, overrides)
        binary = pred.binary
        for row, s in enumerate(chunk):
            keys.append(sample_key(s))
            ious.append(iou(binary[row], targets[row] > 0.5))
    extras = {"mask_eval": bool(mask_eval), "n_samples": len(samples)}
    if mask_eval:
        extras["n_masked"] = n_masked
    return EvalReport.from_ious(keys, ious, model.config.fingerprint(), seed, extras=extras)
