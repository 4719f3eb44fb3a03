"""Finite-difference check of the whole model on a tiny instance."""

import contextlib

import numpy as np

from .contrastive import contrastive_loss
from .decode import bce_loss
from .engine import grad_enabled, no_grad
from .engine.gradcheck import check_gradients
from .model import VLT, ModelConfig

# one encoder and one decoder layer keep a check of every entry inside a minute
TINY = dict(image_size=16, dim=8, heads=2, n_q=2, n_t=3, cnn_channels=(4, 4), layers_enc=1, layers_dec=1, ffn_mult=2)
STEPS = (1e-4, 1e-5, 1e-6)


def tiny_problem(seed=0, **overrides):
    """Model with a 2x2 feature map, C=8, N_q=2, plus a 3-sample batch of 3-word sentences.

    Parameters are moved off the initial point (see below) so the check is
    well conditioned. Returns (model, loss_fn). The loss is BCE on all three samples plus the
    contrastive term with sample 1 as positive and sample 2 as negative.
    """
    cfg = ModelConfig(**{**TINY, **overrides})
    vocab_size = 10
    model = VLT(cfg, vocab_size, seed=seed)
    rng = np.random.default_rng(seed + 1)
    # Move to a generic point. Zero-initialised biases put ReLU inputs exactly on
    # the kink; small positive values move them off it and keep the one-channel
    # decoder layers alive. At init the vision path shrinks activations enough
    # that every softmax is uniform to ~1e-4 and many gradients sit at the
    # finite-difference noise floor; doubling the matrices fixes that.
    for name, p in model.named_parameters():
        if not p.data.any():
            p.data = np.abs(rng.normal(0.0, 0.1, p.data.shape))
        elif p.data.ndim == 2 and not name.startswith("text."):
            p.data = p.data * 2.0
    images = rng.uniform(0, 1, size=(3, cfg.image_size, cfg.image_size, 3))
    ids = np.zeros((3, cfg.n_t), dtype=np.int64)
    ids[:, :3] = rng.integers(3, vocab_size, size=(3, 3))
    lengths = np.array([3, 3, 3])
    targets = (rng.uniform(size=(3, cfg.image_size, cfg.image_size)) > 0.6).astype(np.float64)

    def loss_fn():
        out = model(images, ids, lengths)
        f = out.features("pooled")
        mcl = contrastive_loss(f[0], f[1:2], f[2:3], tau=0.5)
        return bce_loss(out.logits, targets) + mcl * 0.5

    return model, loss_fn


class _StageMemo:
    """Stands in for one top-level submodule during finite differences.

    Under no_grad the first call is remembered; later calls with the same
    argument objects and unchanged parameters return that output, so only
    stages downstream of the perturbed entry are recomputed. Results are
    bitwise the same as a full forward.
    """

    def __init__(self, module):
        self.module = module
        self.params = module.parameters()
        self.entry = None

    def __getattr__(self, name):
        return getattr(self.module, name)

    def _key(self, args):
        key = tuple(a if isinstance(a, (int, float, str, tuple, type(None))) else id(a) for a in args)
        return key, b"".join(p.data.tobytes() for p in self.params)

    def __call__(self, *args):
        if grad_enabled():
            return self.module(*args)
        key, state = self._key(args)
        if self.entry is not None and self.entry[:2] == (key, state):
            return self.entry[3]
        out = self.module(*args)
        if self.entry is None:
            # args are kept alive so their ids cannot be reused
            self.entry = (key, state, args, out)
        return out


STAGES = ("text", "image", "fusion", "queries", "encoder", "decoder", "balance", "mask_decoder")


@contextlib.contextmanager
def staged(model, loss_fn):
    saved = {name: getattr(model, name) for name in STAGES if getattr(model, name) is not None}
    try:
        for name, mod in saved.items():
            setattr(model, name, _StageMemo(mod))
        with no_grad():
            loss_fn()  # records the unperturbed stage outputs
        yield
    finally:
        for name, mod in saved.items():
            setattr(model, name, mod)


def full_model_gradcheck(seed=0, steps=STEPS, rtol=1e-4, max_per_param=None, memo=True, **overrides):
    model, loss_fn = tiny_problem(seed, **overrides)
    params = list(model.named_parameters())
    with staged(model, loss_fn) if memo else contextlib.nullcontext():
        # atol=0: pass fraction counts relative agreement only
        return check_gradients(loss_fn, params, step=steps[0], rtol=rtol, atol=0.0,
                               max_per_param=max_per_param, retry_steps=steps[1:])
