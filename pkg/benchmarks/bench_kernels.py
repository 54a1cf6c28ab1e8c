"""Compare the compiled and numpy segment kernels on GAT-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from hada.numerics import _kernels_py
from hada.numerics import kernels

try:
    from hada.numerics import _kernels as compiled
except ImportError:
    compiled = None


def cases(rng):
    # edge counts of a batch of 20 items with two upstream models
    for n_seg, n_edges, width in ((40, 1_200, 1), (40, 1_200, 128), (400, 24_000, 1), (400, 24_000, 128)):
        seg = np.sort(rng.integers(0, n_seg, n_edges))
        shape = (n_edges,) if width == 1 else (n_edges, width)
        yield f"sum  E={n_edges:>6} d={width:>3}", "sum", rng.standard_normal(shape), seg, n_seg
    for n_seg, n_edges in ((40, 1_200), (400, 24_000)):
        seg = np.sort(rng.integers(0, n_seg, n_edges))
        yield f"max  E={n_edges:>6} d=  1", "max", rng.standard_normal(n_edges), seg, n_seg


def time_call(fn, repeat):
    return min(timeit.repeat(fn, number=10, repeat=repeat)) / 10


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if compiled is None:
        print("compiled extension not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'case':<24} {'numpy us':>10} {'cython us':>10} {'speedup':>8}")
    for name, op, values, seg, n in cases(rng):
        fn = kernels.segment_sum if op == "sum" else kernels.segment_max
        t_py = time_call(lambda: fn(values, seg, n, impl=_kernels_py), args.repeat)
        if compiled is None:
            print(f"{name:<24} {t_py * 1e6:10.1f} {'-':>10} {'-':>8}")
            continue
        a, b = fn(values, seg, n, impl=_kernels_py), fn(values, seg, n, impl=compiled)
        assert a.tobytes() == b.tobytes(), name
        t_cy = time_call(lambda: fn(values, seg, n, impl=compiled), args.repeat)
        print(f"{name:<24} {t_py * 1e6:10.1f} {t_cy * 1e6:10.1f} {t_py / t_cy:7.1f}x")


if __name__ == "__main__":
    main()
