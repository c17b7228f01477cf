"""Time the numba loop kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each case runs both backends on identical inputs, checks they agree, and
prints the best-of-N wall time. A final case times one full training step
with the dispatcher routed each way.
"""
import argparse
import time

import numpy as np

from covidnet import arch, kernels, training


def best_of(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


CASES = [
    # name, x shape, w shape, stride, pad, groups
    ("depthwise 3x3 128ch 16x16", (32, 128, 16, 16), (128, 1, 3, 3), 1, 1, 128),
    ("depthwise 3x3 512ch 4x4", (32, 512, 4, 4), (512, 1, 3, 3), 1, 1, 512),
    ("grouped 3x3 g=4 64ch", (16, 64, 16, 16), (64, 16, 3, 3), 1, 1, 4),
    ("stem 7x7 s2 1->32", (16, 1, 64, 64), (32, 1, 7, 7), 2, 3, 1),
]


def bench_conv(repeat):
    rng = np.random.default_rng(0)
    print(f"{'case':<28} {'pass':<8} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, xs, ws, stride, pad, groups in CASES:
        x, w = rng.standard_normal(xs), rng.standard_normal(ws)
        b = rng.standard_normal(ws[0])
        y_np = kernels.conv2d_forward_np(x, w, b, stride, pad, groups)
        y_nb = kernels.conv2d_forward_nb(x, w, b, stride, pad, groups)
        assert np.allclose(y_np, y_nb, rtol=1e-10, atol=1e-10), name
        g = rng.standard_normal(y_np.shape)
        rows = [
            ("forward", lambda: kernels.conv2d_forward_np(x, w, b, stride, pad, groups),
             lambda: kernels.conv2d_forward_nb(x, w, b, stride, pad, groups)),
            ("backward", lambda: kernels.conv2d_backward_np(x, w, g, stride, pad, groups),
             lambda: kernels.conv2d_backward_nb(x, w, g, stride, pad, groups)),
        ]
        for which, f_np, f_nb in rows:
            t_np, t_nb = best_of(f_np, repeat), best_of(f_nb, repeat)
            print(f"{name:<28} {which:<8} {1e3 * t_np:>10.2f} {1e3 * t_nb:>10.2f} {t_np / t_nb:>7.2f}x")


def bench_pool(repeat):
    x = np.random.default_rng(1).standard_normal((32, 64, 32, 32))
    y_np, a_np = kernels.maxpool_forward_np(x, 2, 2)
    y_nb, a_nb = kernels.maxpool_forward_nb(x, 2, 2)
    assert np.array_equal(y_np, y_nb)
    t_np = best_of(lambda: kernels.maxpool_forward_np(x, 2, 2), repeat)
    t_nb = best_of(lambda: kernels.maxpool_forward_nb(x, 2, 2), repeat)
    print(f"{'maxpool 2x2 64ch 32x32':<28} {'forward':<8} {1e3 * t_np:>10.2f} {1e3 * t_nb:>10.2f} {t_np / t_nb:>7.2f}x")


def bench_step(repeat):
    graph = arch.build_covidnet()
    params = arch.init_params(graph, 0)
    rng = np.random.default_rng(2)
    x = rng.random((63, 1, 64, 64))
    y = np.tile(np.arange(3), 21)
    times = {}
    saved = kernels.NUMBA_ENABLED
    try:
        for flag in (False, True):
            kernels.NUMBA_ENABLED = flag
            times[flag] = best_of(lambda: training.loss_and_grads(graph, params, x, y), max(1, repeat // 2))
    finally:
        kernels.NUMBA_ENABLED = saved
    t_np, t_nb = times[False], times[True]
    print(f"{'train step, batch 63':<28} {'fwd+bwd':<8} {1e3 * t_np:>10.1f} {1e3 * t_nb:>10.1f} {t_np / t_nb:>7.2f}x")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-step", action="store_true", help="skip the full training-step case")
    args = ap.parse_args()
    bench_conv(args.repeat)
    bench_pool(args.repeat)
    if not args.skip_step:
        bench_step(args.repeat)


if __name__ == "__main__":
    main()
