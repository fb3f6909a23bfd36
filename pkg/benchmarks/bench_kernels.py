"""Time the compiled patch gather/scatter against the pure-numpy fallback.

Runs the five convolution shapes used by the face coder (64x64 input,
stride-2 3x3 kernels) through im2col / col2im and the full conv2d
forward+backward, then prints per-shape medians and the speedup.

Usage: python3 benchmarks/bench_kernels.py [--batch 16] [--repeats 7]
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from fldkit import _kernels_py
from fldkit.kernels import conv2d_backward, conv2d_forward

try:
    from fldkit import _kernels
except ImportError:  # pragma: no cover - built extension missing
    _kernels = None

# (H, W, Cin, Cout): the face-coder ladder for a 64px input.
SHAPES = [
    (64, 64, 3, 16),
    (32, 32, 16, 32),
    (16, 16, 32, 64),
    (8, 8, 64, 128),
    (4, 4, 128, 128),
]


def median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_backend(impl, x, kern, stride, padding, repeats):
    kh, kw, ci, _ = kern.shape
    cols = impl.im2col(x, kh, kw, stride, padding)
    t_gather = median_time(lambda: impl.im2col(x, kh, kw, stride, padding), repeats)
    t_scatter = median_time(
        lambda: impl.col2im(cols, x.shape, kh, kw, stride, padding), repeats
    )
    return t_gather, t_scatter, cols


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--batch", type=int, default=16)
    parser.add_argument("--repeats", type=int, default=7)
    args = parser.parse_args()

    if _kernels is None:
        print("compiled extension not built; timing the python backend only")
    rng = np.random.default_rng(0)
    rows = []
    for h, w, ci, co in SHAPES:
        x = np.ascontiguousarray(rng.standard_normal((args.batch, h, w, ci)))
        kern = rng.standard_normal((3, 3, ci, co))
        tg_py, ts_py, cols_py = bench_backend(_kernels_py, x, kern, 2, 1, args.repeats)
        if _kernels is not None:
            tg_c, ts_c, cols_c = bench_backend(_kernels, x, kern, 2, 1, args.repeats)
            if not np.array_equal(cols_py, cols_c):
                raise SystemExit(f"backend mismatch on shape {(h, w, ci, co)}")
        else:
            tg_c = ts_c = float("nan")
        rows.append((f"{h}x{w}x{ci}->{co}", tg_py, tg_c, ts_py, ts_c))

    print(f"\nbatch={args.batch}, median of {args.repeats} runs, times in ms")
    print(f"{'shape':>16} | {'gather py':>10} {'gather c':>10} {'x':>5} | "
          f"{'scatter py':>10} {'scatter c':>10} {'x':>5}")
    for name, tg_py, tg_c, ts_py, ts_c in rows:
        print(f"{name:>16} | {tg_py * 1e3:>10.3f} {tg_c * 1e3:>10.3f} "
              f"{tg_py / tg_c:>5.1f} | {ts_py * 1e3:>10.3f} {ts_c * 1e3:>10.3f} "
              f"{ts_py / ts_c:>5.1f}")

    # whole-layer cost through the active backend (gather + GEMM + scatter)
    print("\nfull conv2d forward+backward through the active backend:")
    for h, w, ci, co in SHAPES:
        x = np.ascontiguousarray(rng.standard_normal((args.batch, h, w, ci)))
        kern = rng.standard_normal((3, 3, ci, co))
        y = conv2d_forward(x, kern, 2, 1)
        dy = np.ones_like(y)
        t_f = median_time(lambda: conv2d_forward(x, kern, 2, 1), args.repeats)
        t_b = median_time(lambda: conv2d_backward(x, kern, dy, 2, 1), args.repeats)
        print(f"{h:>4}x{w}x{ci:<3} -> {co:<3}  fwd {t_f * 1e3:7.3f} ms   "
              f"bwd {t_b * 1e3:7.3f} ms")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
