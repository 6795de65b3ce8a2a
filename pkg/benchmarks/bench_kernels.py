"""Benchmark the numba kernels against the pure-numpy fallback.

Run:  python3 benchmarks/bench_kernels.py [--repeats N]

Shapes mirror a desk-scale training step (stacked dual streams, batch 32,
sequence ~16, width 64). The numba backend is warmed up before timing so
JIT compilation is excluded.
"""

import argparse
import time

import numpy as np

from sqt.kernels import numba_impl, numpy_impl

RNG = np.random.default_rng(0)


def bench(name, fn_np, fn_nb, args_np, args_nb, repeats):
    fn_nb(*args_nb)  # warm the JIT
    fn_np(*args_np)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn_np(*args_np)
    t_np = (time.perf_counter() - t0) / repeats
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn_nb(*args_nb)
    t_nb = (time.perf_counter() - t0) / repeats
    print(f"{name:28s} numpy {t_np * 1e6:9.1f} us   numba {t_nb * 1e6:9.1f} us"
          f"   speedup {t_np / t_nb:5.2f}x")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=200)
    n = ap.parse_args().repeats

    rows, d, dff, k, v = 1024, 64, 128, 6, 32
    x = RNG.normal(size=(rows, d)).astype(np.float32)
    live = np.ones((rows, d), dtype=np.uint8)
    g = RNG.normal(size=(rows, d)).astype(np.float32)
    print(f"rows={rows} d={d} repeats={n}\n")

    p_np = numpy_impl.softmax_rows(x, live)
    bench("softmax_rows", numpy_impl.softmax_rows, numba_impl.softmax_rows,
          (x, live), (x, live), n)
    bench("softmax_rows_grad", numpy_impl.softmax_rows_grad,
          numba_impl.softmax_rows_grad, (p_np, g), (p_np, g), n)

    scores = RNG.normal(size=(64, 2, 16, 16)).astype(np.float32)
    key_live = np.ones((64, 16), dtype=np.uint8)
    probs = numpy_impl.attn_softmax(scores, key_live, True)
    gp = RNG.normal(size=scores.shape).astype(np.float32)
    bench("attn_softmax (causal)", numpy_impl.attn_softmax,
          numba_impl.attn_softmax, (scores, key_live, True),
          (scores, key_live, True), n)
    bench("attn_softmax_grad", numpy_impl.attn_softmax_grad,
          numba_impl.attn_softmax_grad, (probs, gp), (probs, gp), n)

    gain = np.ones(d, dtype=np.float32)
    bias = np.zeros(d, dtype=np.float32)
    _, mean, rstd = numpy_impl.layer_norm(x, gain, bias, 1e-5)
    bench("layer_norm", numpy_impl.layer_norm, numba_impl.layer_norm,
          (x, gain, bias, 1e-5), (x, gain, bias, 1e-5), n)
    bench("layer_norm_grad", numpy_impl.layer_norm_grad,
          numba_impl.layer_norm_grad, (x, gain, mean, rstd, g),
          (x, gain, mean, rstd, g), n)

    logits = RNG.normal(size=(rows, v)).astype(np.float32)
    targets = RNG.integers(0, v, size=rows)
    live1 = np.ones(rows, dtype=np.uint8)
    pr, _ = numpy_impl.cross_entropy_logits(logits, targets, live1)
    bench("cross_entropy_logits", numpy_impl.cross_entropy_logits,
          numba_impl.cross_entropy_logits, (logits, targets, live1),
          (logits, targets, live1), n)
    bench("cross_entropy_grad", numpy_impl.cross_entropy_logits_grad,
          numba_impl.cross_entropy_logits_grad, (pr, targets, live1, 1e-3),
          (pr, targets, live1, 1e-3), n)

    pn = RNG.normal(size=rows * d).astype(np.float32)
    gn = RNG.normal(size=rows * d).astype(np.float32)
    m = np.zeros(rows * d, dtype=np.float32)
    vv = np.zeros(rows * d, dtype=np.float32)
    bench("adam_update", numpy_impl.adam_update, numba_impl.adam_update,
          (pn.copy(), gn, m.copy(), vv.copy(), 1e-3, 0.9, 0.98, 1e-8, 0.1, 0.02),
          (pn.copy(), gn, m.copy(), vv.copy(), 1e-3, 0.9, 0.98, 1e-8, 0.1, 0.02), n)

    ids = RNG.integers(0, 22, size=rows)
    table = np.zeros((22, d), dtype=np.float32)
    bench("scatter_add_rows", numpy_impl.scatter_add_rows,
          numba_impl.scatter_add_rows, (table.copy(), ids, g),
          (table.copy(), ids, g), n)
    code_ids = RNG.integers(0, k, size=rows)
    bench("ema_accumulate", numpy_impl.ema_accumulate,
          numba_impl.ema_accumulate, (code_ids, x, k), (code_ids, x, k), n)


if __name__ == "__main__":
    main()
