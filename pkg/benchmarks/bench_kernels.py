"""Benchmark the numba kernels against their pure-numpy twins.

Usage: python benchmarks/bench_kernels.py [--repeats 20]

The dispatch in occlumove.kernels picks one path at import from the
OCCLUMOVE_NUMBA env flag; this script times both implementations directly
at the sizes the pipeline actually runs (64x64 latents, 1024-row attention).
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from occlumove import kernels as K


def bench(fn, *args, repeats=20):
    fn(*args)  # warm-up (and numba compile)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    z = rng.standard_normal((4, 64, 64))
    big = rng.standard_normal((4, 512, 512))
    logits = rng.standard_normal((1024, 1024))
    rows = (rng.uniform(size=1024) < 0.5).astype(np.uint8)
    cols = (rng.uniform(size=1024) < 0.5).astype(np.uint8)
    cols[0] = 1
    mask = (rng.uniform(size=(64, 64)) < 0.5).astype(np.uint8)
    stoch = K._np_softmax_rows(rng.standard_normal((1024, 1024)))
    vec = rng.uniform(size=1024)
    grad32 = rng.standard_normal((4, 32, 32))

    cases = [
        ("softmax_rows 1024x1024", K._np_softmax_rows, K._nb_softmax_rows, (logits,)),
        ("masked_softmax 1024x1024", K._np_masked_softmax_rows,
         K._nb_masked_softmax_rows, (logits, rows, cols)),
        ("blend_masked 4x64x64", K._np_blend_masked, K._nb_blend_masked,
         (z, z + 1.0, mask)),
        ("bilinear 4x512x512 -> 64", K._np_bilinear_resize, K._nb_bilinear_resize,
         (big, 64, 64)),
        ("bilinear 4x32x32 -> 64", K._np_bilinear_resize, K._nb_bilinear_resize,
         (grad32, 64, 64)),
        ("bilinear_adjoint 64 -> 32", K._np_bilinear_resize_adjoint,
         K._nb_bilinear_resize_adjoint, (z, 32, 32)),
        ("block_mean 4x512x512 /8", K._np_block_mean, K._nb_block_mean, (big, 8)),
        ("nearest_upsample 4x64 x8", K._np_nearest_upsample, K._nb_nearest_upsample,
         (z, 8)),
        ("matpow_vec 1024^2 @ v, p=3", K._np_matpow_vec, K._nb_matpow_vec,
         (stoch, vec, 3)),
    ]

    print(f"{'kernel':<30} {'numpy':>12} {'numba':>12} {'speedup':>9}")
    for name, np_fn, nb_fn, fargs in cases:
        t_np = bench(np_fn, *fargs, repeats=args.repeats)
        t_nb = bench(nb_fn, *fargs, repeats=args.repeats)
        print(f"{name:<30} {t_np*1e3:>10.3f}ms {t_nb*1e3:>10.3f}ms "
              f"{t_np/t_nb:>8.2f}x")
    print(f"\nactive dispatch: {K.active_backend()} "
          f"(set OCCLUMOVE_NUMBA=0 for the numpy path)")


if __name__ == "__main__":
    main()
