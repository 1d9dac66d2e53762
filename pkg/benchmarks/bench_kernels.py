"""Compare the compiled and pure-Python kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from roadssda import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    lines = [(rng.uniform(0, 1024, 6), rng.uniform(0, 1024, 6), float(rng.integers(3, 12))) for _ in range(40)]
    pred = rng.integers(0, 2, (2048, 2048)).astype(np.uint8)
    gt = rng.choice(np.array([0, 1, 255], np.uint8), (2048, 2048))

    backends = kernels.backends()
    print(f"default backend: {kernels.BACKEND}")
    print(f"{'kernel':<28}" + "".join(f"{name:>12}" for name in backends))
    for label, make in (
        ("stroke 40 polylines 1024^2", lambda b: lambda: [b.stroke_polyline(np.zeros((1024, 1024), np.uint8), xs, ys, w) for xs, ys, w in lines]),
        ("iou_counts 2048^2", lambda b: lambda: b.iou_counts(pred, gt)),
    ):
        row = [best_of(make(b), args.repeat) for b in backends.values()]
        print(f"{label:<28}" + "".join(f"{t * 1e3:>10.1f}ms" for t in row))


if __name__ == "__main__":
    main()
