"""Compare the compiled and numpy matmul backends.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Times raw kernel calls on shapes typical of the desk model, then one
forward+backward training step of the model under each backend, and checks
both backends produce bitwise-identical outputs.
"""

import argparse
import time

import numpy as np

from vltseg.engine import backward, kernels, reset_tape

SHAPES = [
    # (batch, m, k, p)
    (1, 4096, 27, 16),  # first conv, im2col rows x patch
    (1, 1024, 144, 32),  # second conv
    (16, 64, 32, 32),  # attention-sized products
    (1, 1024, 288, 32),  # linear on flattened features
]


def bench(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_table(repeat):
    rng = np.random.default_rng(0)
    print("shape (n, m, k, p)\tpython ms\tcython ms\tspeedup\tbitwise")
    for n, m, k, p in SHAPES:
        a = rng.standard_normal((n, m, k))
        b = rng.standard_normal((n, k, p))
        res = {}
        times = {}
        for name in ("python", "cython"):
            kernels.use(name)
            res[name] = kernels.matmul3(a, b)
            times[name] = bench(lambda: kernels.matmul3(a, b), repeat)
        same = np.array_equal(res["python"], res["cython"])
        print(f"{(n, m, k, p)}\t{times['python'] * 1e3:.2f}\t{times['cython'] * 1e3:.2f}\t"
              f"{times['python'] / times['cython']:.2f}x\t{same}")


def step_table(repeat, batch=8):
    from vltseg.data import generate_dataset
    from vltseg.decode import bce_loss
    from vltseg.model import VLT, ModelConfig

    ds = generate_dataset(4, 0)
    cfg = ModelConfig.desk()
    images, ids, lengths, targets = ds.collate(ds.samples[:batch], cfg.n_t)
    print(f"\nmodel step (desk config, batch {batch})\tms")
    for name in ("python", "cython"):
        kernels.use(name)
        model = VLT(cfg, len(ds.vocab), seed=0)

        def step():
            reset_tape()
            out = model(images, ids, lengths)
            backward(bce_loss(out.logits, targets))

        print(f"{name}\t{bench(step, repeat) * 1e3:.1f}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    try:
        from vltseg.engine import _kernels  # noqa: F401
    except ImportError:
        print("compiled extension not built; run `pip install -e .` first")
        return 1
    default = kernels.BACKEND
    try:
        kernel_table(args.repeat)
        step_table(args.repeat)
    finally:
        kernels.use(default)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
