"""Time the conv/pool kernels with numba on and off.

    python3 benchmarks/bench_kernels.py [--batch 256] [--repeat 5]
"""
import argparse
import time

import numpy as np

from czsl import diffcore as dc
from czsl import kernels
from czsl.encoder import backbone_apply, init_backbone


def bench(fn, repeat):
    fn()  # warm-up (jit compile)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    x = rng.random((args.batch, 3, args.size, args.size))
    bb = init_backbone(rng)
    params = bb.params.to_tensors()
    h = rng.standard_normal((args.batch, 32, args.size, args.size))

    def forward():
        with dc.no_grad():
            backbone_apply(params, x, bb.pools)

    def train_step():
        dc.value_and_grad(lambda P, a: dc.tsum(backbone_apply(P, a, bb.pools)), bb.params, x)

    cases = {
        "im2col 3x3": lambda: kernels.im2col(h, 3, 1),
        "maxpool 2x2": lambda: kernels.maxpool2x2(h),
        "backbone forward": forward,
        "backbone forward+backward": train_step,
    }
    print(f"{'kernel':28s} {'numba (ms)':>11s} {'numpy (ms)':>11s} {'speedup':>8s}")
    for name, fn in cases.items():
        kernels.use_numba(True)
        t_nb = bench(fn, args.repeat)
        kernels.use_numba(False)
        t_np = bench(fn, args.repeat)
        print(f"{name:28s} {t_nb * 1e3:11.2f} {t_np * 1e3:11.2f} {t_np / t_nb:7.2f}x")
    kernels.use_numba(True)


if __name__ == "__main__":
    main()
