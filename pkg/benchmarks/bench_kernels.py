"""Compiled kernels vs the pure-Python/numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from imbtext import kernels


def cases(impl):
    state = np.array([1, 2, 3, 4], dtype=np.uint64)
    uni = np.empty(100_000)
    rng = np.random.default_rng(0)
    scores = rng.standard_normal((4 * 4 * 64, 64))
    mask = (rng.random(scores.shape) < 0.8).astype(np.uint8)
    mask[:, 0] = 1
    out = np.empty_like(scores)
    return {
        "fill_uniform(100k)": lambda: impl.fill_uniform(state, uni),
        "masked_softmax(1024x64)": lambda: impl.masked_softmax(scores, mask, out),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    fast = kernels.compiled()
    if fast is None:
        print("compiled extension not built; only the fallback is available")
    slow = kernels.fallback
    print(f"{'kernel':<26}{'compiled ms':>14}{'fallback ms':>14}{'speedup':>10}")
    for name, fn in cases(slow).items():
        t_slow = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
        if fast is None:
            print(f"{name:<26}{'-':>14}{t_slow:>14.3f}{'-':>10}")
            continue
        t_fast = min(timeit.repeat(cases(fast)[name], number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<26}{t_fast:>14.3f}{t_slow:>14.3f}{t_slow / t_fast:>9.1f}x")


if __name__ == "__main__":
    main()
