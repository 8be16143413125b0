"""Compare the compiled im2col/col2im kernels against the pure-numpy fallback.

Usage:
    python benchmarks/bench_conv.py [--batch 8] [--size 64] [--repeats 30]

Times the raw patch-extraction/scatter kernels and a full conv2d
forward+backward through the autodiff graph, once per backend.
"""

import argparse
import time

import numpy as np

from ltnn import kernels
from ltnn.tensor import Tensor, conv2d


def _time(fn, repeats):
    fn()  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_backend(name, batch, channels, size, repeats):
    kernels.set_backend(name)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(batch, channels, size + 2, size + 2))
    cols = kernels.im2col(x, 3, 3, 1, 1)

    t_im2col = _time(lambda: kernels.im2col(x, 3, 3, 1, 1), repeats)
    t_col2im = _time(lambda: kernels.col2im(cols, x.shape, 3, 3, 1, 1), repeats)

    xt = Tensor(rng.normal(size=(batch, channels, size, size)), requires_grad=True)
    w = Tensor(rng.normal(size=(2 * channels, channels, 3, 3)) * 0.1, requires_grad=True)
    b = Tensor(np.zeros(2 * channels), requires_grad=True)

    def fwd_bwd():
        xt.zero_grad()
        w.zero_grad()
        b.zero_grad()
        conv2d(xt, w, b, stride=1, padding=1).sum().backward()

    t_conv = _time(fwd_bwd, max(3, repeats // 3))
    return t_im2col, t_col2im, t_conv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=30)
    args = ap.parse_args()

    backends = ["numpy"]
    if kernels.HAVE_EXT:
        backends.insert(0, "ext")
    else:
        print("compiled extension not available; timing the fallback only\n")

    original = kernels.current_backend()
    results = {}
    try:
        for name in backends:
            results[name] = bench_backend(
                name, args.batch, args.channels, args.size, args.repeats
            )
    finally:
        kernels.set_backend(original)

    shape = f"({args.batch}, {args.channels}, {args.size}, {args.size})"
    print(f"input {shape}, 3x3 kernel, stride 1, best of {args.repeats}\n")
    print(f"{'backend':<8} {'im2col':>12} {'col2im':>12} {'conv fwd+bwd':>14}")
    for name, (a, b, c) in results.items():
        print(f"{name:<8} {a*1e3:>10.2f}ms {b*1e3:>10.2f}ms {c*1e3:>12.2f}ms")

    if len(results) == 2:
        ext, np_ = results["ext"], results["numpy"]
        print(
            f"\nspeedup   {np_[0]/ext[0]:>10.2f}x {np_[1]/ext[1]:>10.2f}x "
            f"{np_[2]/ext[2]:>12.2f}x"
        )


if __name__ == "__main__":
    main()
