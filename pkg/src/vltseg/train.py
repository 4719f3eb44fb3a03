"""Training loop: segmentation BCE plus the masked contrastive term."""

import os
from dataclasses import asdict, dataclass

import numpy as np

from .contrastive import RelationshipTag, build_batch, contrastive_loss, mask_expression, sido_cap
from .decode import bce_loss
from .engine import Adam, NonFiniteError, backward, no_grad, reset_tape
from .engine import checkpoint as ckpt
from .query import global_word_importance


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; carries the offending batch."""

    def __init__(self, step, batch_ids, detail):
        super().__init__(f"non-finite loss at step {step} ({detail}); batch sample ids: {batch_ids}")
        self.step = step
        self.batch_ids = batch_ids


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    lambda_mcl: float = 0.01
    tau: float = 0.1
    n_m: int = 3
    n_so: int = -1  # -1: every other expression of the object
    n_do_fraction: float = 0.1
    mcl_denominator: str = "current"
    mcl_feature: str = "pooled"
    mask_variants: bool = True  # false: plain contrastive learning without masked positives
    grad_clip: float = 1.0  # global gradient norm cap, 0 disables
    mcl_warmup: int = 0  # steps over which lambda_mcl ramps up linearly from 0
    checkpoint_every: int = 0

    def mcl_weight(self, step):
        if self.mcl_warmup > 0:
            return self.lambda_mcl * min(1.0, (step + 1) / self.mcl_warmup)
        return self.lambda_mcl

    @property
    def n_do(self):
        return sido_cap(self.batch_size, self.n_do_fraction)

    def to_dict(self):
        return asdict(self)


@dataclass
class StepResult:
    step: int
    bce: float
    mcl: float
    total: float
    batch_ids: list


def word_importance(model, images, ids, lengths):
    """Global word importances a (B, N_t) from the query attention; uniform for query-free models."""
    if model.config.query_kind != "qgm":
        return np.zeros(ids.shape)
    with no_grad():
        a_qd, _ = model.query_attention(images, ids, lengths)
    return global_word_importance(a_qd)


class Trainer:
    def __init__(self, model, dataset, config, log_path=None, checkpoint_dir=None):
        self.model = model
        self.dataset = dataset
        self.cfg = config
        self.opt = Adam(model.parameters(), lr=config.lr, max_grad_norm=config.grad_clip)
        self.log_path = log_path
        self.checkpoint_dir = checkpoint_dir
        self.step_count = 0
        self.history = []
        if log_path:
            with open(log_path, "w") as fh:
                fh.write("step\tbce\tmcl\ttotal\tlr\tseed\n")

    def make_batch(self, step):
        """Batch content depends only on (seed, step)."""
        rng = np.random.default_rng([self.cfg.seed, step])
        initial = int(rng.integers(len(self.dataset)))
        n_so = None if self.cfg.n_so < 0 else self.cfg.n_so
        batch = build_batch(self.dataset, initial, self.cfg.batch_size, n_so, self.cfg.n_do, rng)
        return batch, rng

    def add_masked_variants(self, batch, rng):
        """Masked copies of the initial sample and its SISO partners become extra positives."""
        ds, n_t = self.dataset, self.model.config.n_t
        pos = [0] + batch.positions(RelationshipTag.SISO)
        samples = [ds.samples[batch.members[p][0]] for p in pos]
        images, ids, lengths, _ = ds.collate(samples, n_t)
        a = word_importance(self.model, images, ids, lengths)
        for row, p in enumerate(pos):
            toks = ids[row, : lengths[row]]
            masked, ok = mask_expression(toks, a[row], self.cfg.n_m, rng, ds.vocab.mask_id)
            if ok:
                batch.masked.append((p, masked))

    def train_step(self, step=None):
        step = self.step_count if step is None else step
        cfg, ds = self.cfg, self.dataset
        batch, rng = self.make_batch(step)
        use_mcl = cfg.lambda_mcl > 0
        if use_mcl and cfg.mask_variants:
            try:
                self.add_masked_variants(batch, rng)
            except NonFiniteError as exc:
                reset_tape()
                raise TrainingAborted(step, [ds.samples[i].key for i in batch.indices()], str(exc)) from exc
        samples = [ds.samples[i] for i in batch.indices()]
        overrides = {}
        for p, toks in batch.masked:
            overrides[len(samples)] = toks
            samples.append(ds.samples[batch.members[p][0]])
        images, ids, lengths, targets = ds.collate(samples, self.model.config.n_t, overrides)
        batch_ids = [s.key for s in samples]
        reset_tape()
        self.opt.zero_grad()
        try:
            out = self.model(images, ids, lengths)
            bce = bce_loss(out.logits, targets)
            total, mcl_val = bce, 0.0
            if use_mcl:
                feats = out.features(cfg.mcl_feature)
                n = len(batch)
                pos_rows = batch.positions(RelationshipTag.SISO) + list(range(n, n + len(batch.masked)))
                neg_rows = batch.positions(RelationshipTag.SIDO)
                mcl = None
                if pos_rows:
                    mcl = contrastive_loss(
                        feats[0],
                        feats[np.array(pos_rows)],
                        feats[np.array(neg_rows)] if neg_rows else None,
                        cfg.tau,
                        cfg.mcl_denominator,
                    )
                if mcl is not None:
                    total = bce + mcl * cfg.mcl_weight(step)
                    mcl_val = mcl.item()
        except NonFiniteError as exc:
            reset_tape()
            raise TrainingAborted(step, batch_ids, str(exc)) from exc
        if not np.isfinite(total.item()):
            reset_tape()
            raise TrainingAborted(step, batch_ids, f"loss={total.item()}")
        backward(total)
        self.opt.step()
        self.step_count = step + 1
        res = StepResult(step, bce.item(), mcl_val, total.item(), batch_ids)
        self.history.append(res)
        if self.log_path:
            with open(self.log_path, "a") as fh:
                fh.write(f"{step}\t{res.bce!r}\t{res.mcl!r}\t{res.total!r}\t{cfg.lr!r}\t{cfg.seed}\n")
        k = cfg.checkpoint_every
        if self.checkpoint_dir and k and self.step_count % k == 0:
            self.save_checkpoint(os.path.join(self.checkpoint_dir, f"step{self.step_count:06d}.vltw"))
        return res

    def run(self, steps=None, callback=None):
        steps = self.cfg.steps if steps is None else steps
        for _ in range(steps):
            res = self.train_step()
            if callback is not None:
                callback(res)
        return self.history

    def save_checkpoint(self, path):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        ckpt.save(path, self.model.state_dict())
