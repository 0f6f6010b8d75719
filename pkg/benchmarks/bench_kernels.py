"""Time the numba and numpy backends of the hot kernels on desk-scale shapes.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 2] [--channels 8] [--size 32]

Prints the best wall time per call for each backend, the speedup and the
largest absolute difference between the two outputs.
"""
import argparse
import time

import numpy as np

from lmk3d import kernels


def best_of(fn, repeat):
    fn()  # warm-up (triggers numba compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=2)
    ap.add_argument("--channels", type=int, default=8)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--dilation", type=int, default=2)
    a = ap.parse_args()

    if not kernels.HAVE_NUMBA:
        print("numba unavailable (or LMK3D_DISABLE_NUMBA set): only the numpy backend can run")
        return

    rng = np.random.default_rng(0)
    n, c, s, d = a.batch, a.channels, a.size, a.dilation
    x = rng.standard_normal((n, c, s, s, s)).astype(np.float32)
    w = (rng.standard_normal((c, c, 3, 3, 3)) * 0.1).astype(np.float32)
    gy = rng.standard_normal((n, c, s, s, s)).astype(np.float32)
    stack = rng.standard_normal((8, s, s, s)).astype(np.float32)
    coords = rng.uniform(-1, s, (3, s, s, s))

    cases = {
        "conv3d forward": lambda b: kernels.conv3d_forward(x, w, d, backend=b),
        "conv3d grad input": lambda b: kernels.conv3d_backward_input(gy, w, d, backend=b),
        "conv3d grad weight": lambda b: kernels.conv3d_backward_weight(x, gy, 3, d, backend=b),
        "trilinear (8 volumes)": lambda b: kernels.trilinear_sample(stack, coords, backend=b),
    }
    print(f"shapes: batch {n}, channels {c}, {s}^3 voxels, dilation {d}; best of {a.repeat}")
    print(f"{'kernel':24s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max diff':>10s}")
    for name, fn in cases.items():
        t_np = best_of(lambda: fn("numpy"), a.repeat)
        t_nb = best_of(lambda: fn("numba"), a.repeat)
        diff = float(np.abs(fn("numpy").astype(np.float64) - fn("numba")).max())
        print(f"{name:24s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:7.1f}x {diff:10.2e}")


if __name__ == "__main__":
    main()
