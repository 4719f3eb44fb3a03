"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line; they are printed together at the end of
the pytest run (see conftest.py) and also when this file is run directly.
The trend criteria (5-7) train 15 desk-scale models and take a while on one
core; VLTSEG_TREND_STEPS shortens them for smoke runs.
"""

import functools
import os
import sys
import time

import numpy as np
import pytest

import oracles
from vltseg.cli import main as cli_main
from vltseg.contrastive import contrastive_loss, p_m
from vltseg.data import generate_dataset
from vltseg.decode import MaskDecoder, QueryBalance, bce_loss
from vltseg.engine import Adam, Tensor, backward, no_grad, reset_tape
from vltseg.evaluate import evaluate
from vltseg.fusion import SpatialDynamicFusion
from vltseg.gradsuite import full_model_gradcheck
from vltseg.model import VLT, ModelConfig
from vltseg.query import QueryGenerator
from vltseg.train import TrainConfig, Trainer
from vltseg.transformer import MultiHeadAttention, TransformerEncoder, sine_position_table

RESULTS = []

SEEDS = (0, 1, 2)
TREND_SCENES = 500
TREND_STEPS = int(os.environ.get("VLTSEG_TREND_STEPS", 1500))
TREND_NQ = 8
MCL_LAMBDA = TrainConfig().lambda_mcl


def record(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    return ok


def rand(rng, *shape):
    return rng.standard_normal(shape)


def randomize(module, rng, scale=0.5):
    for p in module.parameters():
        p.data = rng.standard_normal(p.shape) * scale


def lang_stub(rng, b, n_t, c, lengths):
    from vltseg.encoders import LanguageFeatures

    valid = np.arange(n_t)[None, :] < np.asarray(lengths)[:, None]
    f_t = rand(rng, b, n_t, c) * valid[..., None]
    return LanguageFeatures(Tensor(f_t), Tensor(rand(rng, b, c)), np.asarray(lengths), valid)


# 1 -------------------------------------------------------------------------


def test_c01_gradient_integrity():
    t0 = time.time()
    rep = full_model_gradcheck(seed=0)
    dt = time.time() - t0
    frac, worst = rep.pass_fraction, rep.max_abs_err_of_failures
    ok = frac >= 0.99 and worst <= 1e-6 and dt < 60
    record(1, ok, f"{len(rep.entries)} entries, rel<1e-4 for {frac:.4%}, rest max abs {worst:.1e}, {dt:.1f}s")
    assert ok


# 2 -------------------------------------------------------------------------


def _oracle_errors(rng):
    errs = {}
    c = int(rng.choice([4, 8]))
    n_t = int(rng.integers(2, 5))
    b = int(rng.integers(1, 3))
    h, w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    lengths = rng.integers(1, n_t + 1, size=b)
    lang = lang_stub(rng, b, n_t, c, lengths)

    sdf = SpatialDynamicFusion(c, rng)
    randomize(sdf, rng)
    f_vr = rand(rng, b, h, w, c)
    got = sdf.attention(Tensor(f_vr), lang.F_t, lang.pad_mask).data
    want = oracles.sdf_attention(f_vr, lang.F_t.data, lang.pad_mask, sdf.vis_key.weight.data,
                                 sdf.vis_key.bias.data, sdf.word_key.weight.data, np.zeros(c))
    errs["sdf_attention"] = np.max(np.abs(got - want))

    n_q = int(rng.integers(1, 4))
    qg = QueryGenerator(c, n_q, h * w, rng)
    randomize(qg, rng)
    vq = rand(rng, b, n_q, h * w)
    got = qg.attention(Tensor(vq), lang.F_t, lang.pad_mask).data
    want = oracles.query_attention(vq, lang.F_t.data, lang.pad_mask, qg.w_v.data, qg.w_a.data)
    errs["query_attention"] = np.max(np.abs(got - want))

    heads = int(rng.choice([1, 2, 4]))
    mha = MultiHeadAttention(c, heads, rng)
    randomize(mha, rng)
    q, k = rand(rng, b, n_q, c), rand(rng, b, h * w, c)
    got = mha(Tensor(q), Tensor(k), Tensor(k)).data
    params = {"wq": mha.q_proj.weight.data, "bq": mha.q_proj.bias.data, "wk": mha.k_proj.weight.data,
              "bk": np.zeros(c), "wv": mha.v_proj.weight.data, "bv": mha.v_proj.bias.data,
              "wo": mha.out_proj.weight.data, "bo": mha.out_proj.bias.data}
    want, weights = oracles.multi_head_attention(q, k, k, params, heads)
    errs["multi_head_attention"] = max(np.max(np.abs(got - want)), np.max(np.abs(mha.last_weights.data - weights)))

    qb = QueryBalance(c, rng)
    randomize(qb, rng)
    fq, fr = rand(rng, b, n_q, c), rand(rng, b, n_q, c)
    conf, fb = qb(Tensor(fq), Tensor(fr))
    params = {"wp": qb.query_proj.weight.data, "bp": qb.query_proj.bias.data, "w1": qb.fc1.weight.data,
              "b1": qb.fc1.bias.data, "w2": qb.fc2.weight.data, "b2": qb.fc2.bias.data}
    wc, wfb = oracles.balance(fq, fr, params)
    errs["balance"] = max(np.max(np.abs(conf.data - wc)), np.max(np.abs(fb.data - wfb)))

    md = MaskDecoder(n_q, rng)
    randomize(md, rng)
    fb, fve = rand(rng, 1, n_q, c), rand(rng, 1, h * w, c)
    logits, fm = md(Tensor(fb), Tensor(fve), (h, w))
    convs = [(cv.weight.data, cv.bias.data) for cv in (md.conv1, md.conv2, md.conv3)]
    want, wfm = oracles.decode_mask(fb, fve, h, w, convs, md.head.weight.data, md.head.bias.data)
    errs["decode_mask"] = max(np.max(np.abs(logits.data - want)), np.max(np.abs(fm.data - wfm)))
    return errs


def test_c02_oracle_equivalence():
    rng = np.random.default_rng(2024)
    worst = {}
    for _ in range(100):
        for name, e in _oracle_errors(rng).items():
            worst[name] = max(worst.get(name, 0.0), float(e))
    ok = all(e < 1e-9 for e in worst.values())
    record(2, ok, "max err over 100 instances: " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


# 3 -------------------------------------------------------------------------


def _probability_rows(x, valid=None):
    """Largest |row sum - 1| and largest mass on invalid entries."""
    dev = float(np.max(np.abs(x.sum(-1) - 1.0)))
    leak = 0.0 if valid is None else float(np.max(np.abs(np.where(valid, 0.0, x)), initial=0.0))
    return dev, leak


def test_c03_normalization_suite():
    rng = np.random.default_rng(7)
    dev = leak = 0.0
    for trial in range(100):
        n_t = int(rng.integers(2, 7))
        cfg = ModelConfig(image_size=16, dim=8, heads=2, n_q=int(rng.integers(1, 5)), n_t=n_t,
                          layers_enc=1, layers_dec=1, cnn_channels=(4, 4))
        model = VLT(cfg, 12, seed=trial)
        randomize(model, rng, 0.5)
        b = 2
        lengths = rng.integers(1, n_t + 1, size=b)
        ids = np.where(np.arange(n_t)[None] < lengths[:, None], rng.integers(3, 12, size=(b, n_t)), 0)
        with no_grad():
            out = model(rng.uniform(size=(b, 16, 16, 3)), ids, lengths)
        valid = np.arange(n_t)[None] < lengths[:, None]
        for a, v in ((out.A_sd.data, valid[:, None, None, :]), (out.A_qd.data, valid[:, None, :])):
            d, lk = _probability_rows(a, v)
            dev, leak = max(dev, d), max(leak, lk)
        for attn in (model.encoder.layers[0].attn, model.decoder.layers[0].self_attn,
                     model.decoder.layers[0].cross_attn):
            dev = max(dev, _probability_rows(attn.last_weights.data)[0])
        imp = rng.uniform(0, n_t, size=n_t)
        d, lk = _probability_rows(p_m(imp, valid[0]), valid[0])
        dev, leak = max(dev, d), max(leak, lk)
    ok = dev <= 1e-9 and leak == 0.0
    record(3, ok, f"A_sd/A_qd/attention/p_m: max |sum-1| {dev:.1e}, max padding mass {leak:.1e} (100 instances)")
    assert ok


# 4 -------------------------------------------------------------------------


def test_c04_overfit_eight_samples():
    t0 = time.time()
    ds = generate_dataset(3, seed=0)
    samples = ds.samples[:8]
    cfg = ModelConfig.desk()
    model = VLT(cfg, len(ds.vocab), seed=0)
    opt = Adam(model.parameters(), lr=1e-3)
    images, ids, lengths, targets = ds.collate(samples, cfg.n_t)
    best, step = 0.0, 0
    for step in range(1, 501):
        reset_tape()
        opt.zero_grad()
        out = model(images, ids, lengths)
        backward(bce_loss(out.logits, targets))
        opt.step()
        if step % 25 == 0:
            best = evaluate(model, ds, samples=samples).mean_iou
            if best > 0.90:
                break
    dt = time.time() - t0
    ok = best > 0.90 and dt < 300
    record(4, ok, f"mean IoU {best:.4f} after {step} steps, {dt:.0f}s")
    assert ok


# 5-7 trend experiments ------------------------------------------------------


@functools.lru_cache(maxsize=None)
def trend_dataset(mode):
    return generate_dataset(TREND_SCENES, seed=0, mode=mode)


@functools.lru_cache(maxsize=None)
def trained(mode, n_q, lam, seed):
    ds = trend_dataset(mode)
    train_ds, _ = ds.split(0.2)
    model = VLT(ModelConfig.desk(n_q=n_q), len(ds.vocab), seed=seed)
    cfg = TrainConfig(steps=TREND_STEPS, batch_size=16, lambda_mcl=lam, seed=seed)
    t0 = time.time()
    Trainer(model, train_ds, cfg).run()
    print(f"  trained mode={mode} n_q={n_q} lambda={lam} seed={seed} in {time.time() - t0:.0f}s", flush=True)
    return model


def val_iou(model, mode, mask_eval=False):
    _, val = trend_dataset(mode).split(0.2)
    return evaluate(model, val, mask_eval=mask_eval).mean_iou


@pytest.mark.slow
def test_c05_nq_trend():
    one = [val_iou(trained("mixed", 1, 0.0, s), "mixed") for s in SEEDS]
    many = [val_iou(trained("mixed", TREND_NQ, 0.0, s), "mixed") for s in SEEDS]
    ok = np.mean(many) >= np.mean(one) + 0.02
    record(5, ok, f"IoU N_q=1 {np.mean(one):.4f} {np.round(one, 4).tolist()} vs N_q={TREND_NQ} "
                  f"{np.mean(many):.4f} {np.round(many, 4).tolist()} ({TREND_STEPS} steps)")
    assert ok


@pytest.mark.slow
def test_c06_mcl_masked_robustness():
    drops = {}
    for name, lam in (("no-CL", 0.0), ("MCL", MCL_LAMBDA)):
        d = []
        for s in SEEDS:
            m = trained("mixed", TREND_NQ, lam, s)
            d.append(val_iou(m, "mixed") - val_iou(m, "mixed", mask_eval=True))
        drops[name] = d
    ok = np.mean(drops["MCL"]) < np.mean(drops["no-CL"])
    record(6, ok, f"masked-eval IoU drop MCL {np.mean(drops['MCL']):.4f} {np.round(drops['MCL'], 4).tolist()} vs "
                  f"no-CL {np.mean(drops['no-CL']):.4f} {np.round(drops['no-CL'], 4).tolist()}")
    assert ok


@pytest.mark.slow
def test_c07_cross_template_generalization():
    target = generate_dataset(100, seed=1, mode="position_free")
    res = {}
    for name, lam in (("no-CL", 0.0), ("MCL", MCL_LAMBDA)):
        res[name] = [evaluate(trained("position_rich", TREND_NQ, lam, s), target).mean_iou for s in SEEDS]
    ok = np.mean(res["MCL"]) >= np.mean(res["no-CL"])
    record(7, ok, f"position-rich -> position-free IoU MCL {np.mean(res['MCL']):.4f} "
                  f"{np.round(res['MCL'], 4).tolist()} vs no-CL {np.mean(res['no-CL']):.4f} "
                  f"{np.round(res['no-CL'], 4).tolist()}")
    assert ok


# 8 -------------------------------------------------------------------------


def test_c08_infonce_closed_form():
    # cos+ = 1, cos- = 0, tau = 1: -log(e / (e + 1))
    loss = contrastive_loss(np.array([1.0, 0.0]), [np.array([3.0, 0.0])], [np.array([0.0, 1.0])], tau=1.0).item()
    ok = abs(loss - 0.31326) <= 1e-4
    record(8, ok, f"loss {loss:.6f} (target 0.31326)")
    assert ok


# 9 -------------------------------------------------------------------------


def test_c09_determinism(tmp_path):
    digests = []
    for run in ("a", "b"):
        out = tmp_path / run
        code = cli_main(["train", "--set", "data.n_scenes=20", "--set", "train.checkpoint_every=10",
                         "--seed", "5", "--steps", "10", "--out", str(out)])
        assert code == 0
        digests.append(((out / "model.vltw").read_bytes(), (out / "checkpoints" / "step000010.vltw").read_bytes()))
    ok = digests[0] == digests[1]
    record(9, ok, f"two 10-step train runs: checkpoints {'bitwise identical' if ok else 'differ'}")
    assert ok


# 10 ------------------------------------------------------------------------


def test_c10_permutation_property():
    rng = np.random.default_rng(11)
    enc = TransformerEncoder(8, 2, 2, rng)
    x = rand(rng, 2, 9, 8)
    perm = rng.permutation(9)
    plain = float(np.max(np.abs(enc(Tensor(x)).data[:, perm] - enc(Tensor(x[:, perm])).data)))
    pos = sine_position_table(3, 3, 8)
    with_pos = float(np.max(np.abs(enc(Tensor(x), pos).data[:, perm] - enc(Tensor(x[:, perm]), pos).data)))
    ok = plain <= 1e-9 and with_pos > 1e-3
    record(10, ok, f"max diff without positions {plain:.1e}, with positions {with_pos:.3f}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
