"""Time the numba kernels against their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Shapes follow the default model and evaluation sizes. The numba column is
empty when numba is not installed.
"""
import argparse
import json
import timeit

import numpy as np

from svllreid import _kernels as K


def cases(rng):
    x = rng.normal(size=(64, 33, 128)).astype(np.float32)
    g = rng.normal(size=x.shape).astype(np.float32)
    x2 = rng.normal(size=(64 * 33, 64)).astype(np.float32)
    gamma, beta = np.ones(64, np.float32), np.zeros(64, np.float32)
    _, xhat, rstd = K.layer_norm_forward_np(x2, gamma, beta, 1e-5)
    img = rng.random((64, 32, 3))
    dist = rng.random((80, 80))
    ids = (rng.integers(0, 20, 80), rng.integers(0, 20, 80),
           rng.integers(0, 4, 80), rng.integers(0, 4, 80))
    rects = np.array([[4, 4, 20, 10], [30, 2, 12, 24], [10, 10, 40, 5]])
    colors = rng.random((3, 3))
    canvas = np.zeros((64, 32, 3))
    return {
        "gelu_forward": ((x,), "gelu_forward"),
        "gelu_backward": ((x, g), "gelu_backward"),
        "layer_norm_forward": ((x2, gamma, beta, 1e-5), "layer_norm_forward"),
        "layer_norm_backward": ((x2, xhat, rstd, gamma), "layer_norm_backward"),
        "bilinear_resize": ((img, 128, 64), "bilinear_resize"),
        "rank_queries": ((dist,) + ids, "rank_queries"),
        "render_rects": ((canvas, rects, colors), "render_rects"),
    }


def best_of(fn, args, repeat):
    fn(*args)  # warm up (and compile, for numba)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write the timings here")
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':22s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, (fargs, base) in cases(rng).items():
        t_np = best_of(getattr(K, base + "_np"), fargs, args.repeat)
        t_nb = None
        if K.HAVE_NUMBA:
            t_nb = best_of(getattr(K, "_" + base + "_nb"), fargs, args.repeat)
        rows.append({"kernel": name, "numpy_s": t_np, "numba_s": t_nb})
        nb = f"{t_nb * 1e3:10.3f} {t_np / t_nb:7.1f}x" if t_nb else f"{'-':>10s} {'-':>8s}"
        print(f"{name:22s} {t_np * 1e3:10.3f} {nb}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
