"""Benchmark the compiled vs pure-numpy convolution kernels.

Times im2col / col2im directly and a full conv2d forward+backward step
through each backend. Run after installing the package:

    python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from fna import kernels, ops
from fna.ops import ConvParams
from fna.tensor import Tensor

SHAPES = [
    # (batch, channels, size, kernel, stride, dilation) roughly spanning desk scale
    (8, 8, 24, 3, 1, 1),
    (8, 48, 24, 3, 1, 1),
    (8, 48, 24, 7, 1, 1),
    (2, 16, 64, 3, 1, 1),
    (8, 8, 24, 3, 2, 1),
    (8, 16, 32, 5, 1, 2),
]


def timeit(fn, min_time=0.2):
    fn()  # warmup
    reps = 0
    t0 = time.perf_counter()
    while True:
        fn()
        reps += 1
        elapsed = time.perf_counter() - t0
        if elapsed > min_time and reps >= 3:
            return elapsed / reps * 1e3


def bench_gather_scatter():
    print(f"{'shape':<28}{'op':<9}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    rng = np.random.default_rng(0)
    for n, c, hw, k, stride, dil in SHAPES:
        pad = dil * (k - 1) // 2
        xp = np.pad(rng.standard_normal((n, c, hw, hw)).astype(np.float32),
                    ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        label = f"{n}x{c}x{hw} k{k} s{stride} d{dil}"

        t_np = timeit(lambda: kernels._im2col_numpy(xp, k, stride, dil))
        cols = kernels._im2col_numpy(xp, k, stride, dil)
        out = np.empty_like(cols)
        t_cy = timeit(lambda: kernels._conv_cy.im2col(xp, k, stride, dil, out))
        print(f"{label:<28}{'im2col':<9}{t_np:>10.3f}{t_cy:>11.3f}{t_np / t_cy:>9.2f}")

        t_np = timeit(lambda: kernels._col2im_numpy(cols, xp.shape, k, stride, dil))
        buf = np.zeros(xp.shape, dtype=cols.dtype)
        def cy_col2im():
            buf.fill(0)
            kernels._conv_cy.col2im(cols, k, stride, dil, buf)
        t_cy = timeit(cy_col2im)
        print(f"{label:<28}{'col2im':<9}{t_np:>10.3f}{t_cy:>11.3f}{t_np / t_cy:>9.2f}")


def bench_conv_step():
    print()
    print("conv2d forward+backward (float32)")
    print(f"{'shape':<28}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    rng = np.random.default_rng(0)
    for n, c, hw, k, stride, dil in SHAPES:
        x_data = rng.standard_normal((n, c, hw, hw)).astype(np.float32)
        w_data = (rng.standard_normal((c, c, k, k)) * 0.1).astype(np.float32)
        proj = rng.standard_normal(
            (n, c, kernels.conv_out_size(hw, k, stride, dil * (k - 1) // 2, dil),
             kernels.conv_out_size(hw, k, stride, dil * (k - 1) // 2, dil))
        ).astype(np.float32)

        def step():
            x = Tensor(x_data, requires_grad=True)
            p = ConvParams(Tensor(w_data, requires_grad=True), stride=stride,
                           padding=dil * (k - 1) // 2, dilation=dil)
            ops.dot_const(ops.conv2d(x, p), proj).backward()

        times = {}
        for backend in ("numpy", "cython"):
            kernels.BACKEND = backend
            times[backend] = timeit(step)
        label = f"{n}x{c}x{hw} k{k} s{stride} d{dil}"
        print(f"{label:<28}{times['numpy']:>10.3f}{times['cython']:>11.3f}"
              f"{times['numpy'] / times['cython']:>9.2f}")


if __name__ == "__main__":
    if kernels._conv_cy is None:
        raise SystemExit("compiled extension not available; build it first "
                         "(pip install -e . --no-build-isolation)")
    default = kernels.BACKEND
    print(f"default backend: {default}\n")
    bench_gather_scatter()
    bench_conv_step()
    kernels.BACKEND = default
