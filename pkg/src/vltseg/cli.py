"""Command-line entry point: ``vltseg <command> [options]``."""

import argparse
import os
import sys
import time

import numpy as np

from .config import ConfigError, RunConfig

EXIT_USAGE = 2
EXIT_NONFINITE = 3
EXIT_GRADCHECK = 1

SWEEPS = {
    "nq": ("model.n_q", ["1", "16"]),
    "fusion": ("model.fusion", ["sdf", "tile", "tile_conv4"]),
    "query_kind": ("model.query_kind", ["qgm", "learnt", "ft"]),
    "mcl": ("train.lambda_mcl", ["0", "0.01"]),
}


def _common(p, dataset=True):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, help="seed for all randomness of this command")
    p.add_argument("--out", help="output path")
    if dataset:
        p.add_argument("--dataset", help="dataset directory (from generate-data); generated in memory if absent")


def build_parser():
    ap = argparse.ArgumentParser(prog="vltseg", description="Referring segmentation at desk scale.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic dataset")
    _common(p, dataset=False)
    p.add_argument("--n-scenes", type=int)
    p.add_argument("--mode", choices=["mixed", "position_rich", "position_free"])

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint", help="initial weights")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", help="weights (untrained model if absent)")
    p.add_argument("--mask-eval", action="store_true", help="erase the top-importance word of each expression")
    p.add_argument("--split", choices=["val", "train", "all"], default="val")

    p = sub.add_parser("infer", help="segment one image for one expression")
    _common(p, dataset=False)
    p.add_argument("--checkpoint")
    p.add_argument("--image", required=True, help="binary PPM")
    p.add_argument("--text", required=True)
    p.add_argument("--vocab", help="vocab.txt (default: grammar vocabulary)")

    p = sub.add_parser("ablate", help="train and evaluate a named sweep")
    _common(p)
    p.add_argument("sweep", choices=sorted(SWEEPS))
    p.add_argument("--values", help="comma-separated values overriding the default sweep")
    p.add_argument("--steps", type=int)
    p.add_argument("--mask-eval", action="store_true", help="also report masked evaluation")

    p = sub.add_parser("dump-attention", help="write attention maps for one sample")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--sample", type=int, default=0, help="sample index in the dataset")

    p = sub.add_parser("grad-check", help="finite-difference check of the whole model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-per-param", type=int, help="probe at most this many entries per tensor")
    p.add_argument("--min-fraction", type=float, default=0.99)
    return ap


def _config(args):
    overrides = list(args.set)
    cfg = RunConfig.load(args.config, overrides)
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _dataset(args, cfg):
    from .data import SyntheticDataset, generate_dataset

    if args.dataset:
        return SyntheticDataset.load(args.dataset)
    d = cfg.data
    return generate_dataset(d.n_scenes, d.seed, image_size=d.image_size, mode=d.mode)


def _model(cfg, vocab_size, checkpoint=None):
    from .engine import checkpoint as ckpt
    from .model import VLT

    model = VLT(cfg.model, vocab_size, seed=cfg.train.seed)
    if checkpoint:
        model.load_state_dict(ckpt.load(checkpoint))
    return model


def _run_config_for_checkpoint(args):
    """Explicit --config wins; otherwise use run.cfg saved beside the checkpoint."""
    if not args.config and getattr(args, "checkpoint", None):
        saved = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "run.cfg")
        if os.path.exists(saved):
            args.config = saved
    return _config(args)


def cmd_generate(args):
    from .data import generate_dataset

    cfg = _config(args)
    d = cfg.data
    seed = d.seed if args.seed is None else args.seed
    n = args.n_scenes or d.n_scenes
    ds = generate_dataset(n, seed, image_size=d.image_size, mode=args.mode or d.mode)
    out = args.out or "data"
    ds.save(out)
    print(f"wrote {len(ds.scenes)} scenes, {len(ds)} samples, vocab {len(ds.vocab)} -> {out}")
    return 0


def train_model(cfg, dataset, out_dir=None, init=None, quiet=False):
    from .train import Trainer

    train_ds, _ = dataset.split(cfg.data.val_fraction)
    model = _model(cfg, len(dataset.vocab), init)
    log_path = ckpt_dir = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        cfg.save(os.path.join(out_dir, "run.cfg"))
        log_path = os.path.join(out_dir, "train.log")
        ckpt_dir = os.path.join(out_dir, "checkpoints")
    trainer = Trainer(model, train_ds, cfg.train, log_path=log_path, checkpoint_dir=ckpt_dir)
    t0 = time.time()
    every = max(1, cfg.train.steps // 10)

    def report(res):
        if not quiet and (res.step % every == 0 or res.step == cfg.train.steps - 1):
            print(f"step {res.step}\tbce {res.bce:.4f}\tmcl {res.mcl:.4f}\t{time.time() - t0:.1f}s", flush=True)

    trainer.run(callback=report)
    if out_dir:
        trainer.save_checkpoint(os.path.join(out_dir, "model.vltw"))
    return model


def cmd_train(args):
    from .train import TrainingAborted

    cfg = _config(args)
    if args.steps is not None:
        cfg.train.steps = args.steps
    ds = _dataset(args, cfg)
    try:
        train_model(cfg, ds, args.out or "run", init=args.checkpoint)
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    return 0


def _split(ds, cfg, which):
    if which == "all":
        return ds
    tr, va = ds.split(cfg.data.val_fraction)
    return va if which == "val" else tr


def _table_header():
    from .metrics import THRESHOLDS

    return ["mean_iou"] + [f"pr@{x}" for x in THRESHOLDS]


def cmd_eval(args):
    from .evaluate import evaluate

    cfg = _run_config_for_checkpoint(args)
    ds = _dataset(args, cfg)
    model = _model(cfg, len(ds.vocab), args.checkpoint)
    rep = evaluate(model, _split(ds, cfg, args.split), cfg.eval.batch_size, args.mask_eval, cfg.eval.n_m,
                   seed=cfg.train.seed)
    text = rep.to_tsv()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print("\t".join(_table_header()))
    print("\t".join(f"{v:.4f}" for v in rep.summary_row()))
    print(f"# report fingerprint {rep.fingerprint()}")
    return 0


def cmd_infer(args):
    from .data import grammar_vocabulary
    from .decode import MaskPrediction
    from .encoders import Vocabulary, pad_ids
    from .engine import no_grad
    from .pnm import read_pnm, write_pbm, write_pgm

    cfg = _run_config_for_checkpoint(args)
    vocab = Vocabulary.load(args.vocab) if args.vocab else grammar_vocabulary()
    model = _model(cfg, len(vocab), args.checkpoint)
    img = read_pnm(args.image)
    if img.ndim != 3:
        print("error: --image must be a colour PPM", file=sys.stderr)
        return EXIT_USAGE
    ids, n = pad_ids(vocab.encode(args.text), cfg.model.n_t)
    with no_grad():
        out = model(img[None].astype(np.float64) / 255.0, np.array([ids]), np.array([n]))
    pred = MaskPrediction(out.logits.data[0])
    prefix = args.out or "mask"
    write_pgm(prefix + ".pgm", pred.probabilities)
    write_pbm(prefix + ".pbm", pred.binary)
    logits = pred.logits.astype("<f4")
    with open(prefix + ".f32", "wb") as fh:
        fh.write(f"VLTF32 {logits.shape[0]} {logits.shape[1]} little-endian\n".encode())
        fh.write(logits.tobytes())
    print(f"foreground pixels {int(pred.binary.sum())} -> {prefix}.pgm/.pbm/.f32")
    return 0


def cmd_ablate(args):
    from .evaluate import evaluate

    base = _config(args)
    if args.steps is not None:
        base.train.steps = args.steps
    key, values = SWEEPS[args.sweep]
    if args.values:
        values = [v.strip() for v in args.values.split(",")]
    ds = _dataset(args, base)
    _, val = ds.split(base.data.val_fraction)
    rows = []
    for v in values:
        cfg = RunConfig.from_text(base.dumps(), [f"{key}={v}"])
        model = train_model(cfg, ds, quiet=True)
        modes = [False, True] if (args.mask_eval or args.sweep == "mcl") else [False]
        for masked in modes:
            rep = evaluate(model, val, cfg.eval.batch_size, masked, cfg.eval.n_m, seed=cfg.train.seed)
            rows.append([args.sweep, v, "masked" if masked else "original"] + rep.summary_row())
    header = ["sweep", "value", "eval"] + _table_header()
    lines = [f"# config_fingerprint\t{base.model.fingerprint()}", f"# seed\t{base.train.seed}",
             "\t".join(header)]
    lines += ["\t".join(r[:3] + [f"{x:.4f}" for x in r[3:]]) for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text, end="")
    return 0


def cmd_dump_attention(args):
    from .decode import resize_mask_nearest
    from .engine import no_grad
    from .pnm import write_pgm

    cfg = _run_config_for_checkpoint(args)
    ds = _dataset(args, cfg)
    model = _model(cfg, len(ds.vocab), args.checkpoint)
    if not 0 <= args.sample < len(ds):
        print(f"error: --sample must be in [0, {len(ds)})", file=sys.stderr)
        return EXIT_USAGE
    s = ds.samples[args.sample]
    images, ids, lengths, _ = ds.collate([s], cfg.model.n_t)
    with no_grad():
        out = model(images, ids, lengths)
    out_dir = args.out or "attention"
    os.makedirs(out_dir, exist_ok=True)
    words = ds.vocab.decode(ids[0][: lengths[0]])
    size = (ds.image_size, ds.image_size)
    lines = [f"# sample {s.key}: {s.text}"]
    if out.A_sd is not None:
        a_sd = out.A_sd.data[0]
        for i, w in enumerate(words):
            m = a_sd[..., i]
            write_pgm(os.path.join(out_dir, f"sdf_word{i}_{w}.pgm"), resize_mask_nearest(m / max(m.max(), 1e-12), size))
    if out.A_qd is not None:
        a_qd = out.A_qd.data[0]
        lines.append("query\t" + "\t".join(words))
        for q in range(a_qd.shape[0]):
            lines.append(f"{q}\t" + "\t".join(f"{x:.6f}" for x in a_qd[q, : len(words)]))
        h = w = cfg.model.feature_size
        vq = out.F_vq.data[0].reshape(-1, h, w)
        for q in range(vq.shape[0]):
            m = vq[q] - vq[q].min()
            write_pgm(os.path.join(out_dir, f"query{q}.pgm"), resize_mask_nearest(m / max(m.max(), 1e-12), size))
    if out.C_q is not None:
        lines.append("confidence\t" + "\t".join(f"{x:.6f}" for x in out.C_q.data[0, :, 0]))
    with open(os.path.join(out_dir, "attention.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_grad_check(args):
    from .gradsuite import full_model_gradcheck

    t0 = time.time()
    rep = full_model_gradcheck(args.seed, max_per_param=args.max_per_param)
    ok = rep.ok(args.min_fraction, fallback_atol=1e-6)
    print(f"checked {len(rep.entries)} entries in {time.time() - t0:.1f}s")
    print(f"relative pass fraction {rep.pass_fraction:.5f} (need >= {args.min_fraction})")
    print(f"max abs error among the rest {rep.max_abs_err_of_failures:.3e} (need <= 1e-6)")
    print("PASS" if ok else "FAIL")
    return 0 if ok else EXIT_GRADCHECK


COMMANDS = {
    "generate-data": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "ablate": cmd_ablate,
    "dump-attention": cmd_dump_attention,
    "grad-check": cmd_grad_check,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
