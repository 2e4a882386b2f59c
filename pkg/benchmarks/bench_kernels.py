"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 32]

Prints one row per kernel with the median wall time of each backend and the
speedup. Numba compile time is excluded by a warm-up call. The last row times
a full forward/backward step of conv4-small on 8x8 inputs.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from budgetprune import kernels
from budgetprune import tensor as T
from budgetprune.budget import BudgetSpec, budget_loss, surrogate_cost
from budgetprune.models import build


def median_time(fn, repeat):
    fn()  # warm-up / jit compile
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def cases(batch):
    rng = np.random.default_rng(0)
    w = rng.normal(0, 0.05, 300_000)
    x = rng.normal(size=(batch, 32, 16, 16))
    cols = kernels.im2col(x, 3, 3, 1, 1)
    pooled, arg = kernels.maxpool(x, 2)
    model = build("conv4-small", input_shape=(3, 8, 8))
    budget = BudgetSpec(model.count_prunable(), 0.9)
    xb = rng.normal(size=(batch, 3, 8, 8))
    yb = rng.integers(0, 10, batch)

    def step():
        model.zero_grad()
        task = T.softmax_cross_entropy(model(xb), yb)
        T.add(task, T.mul(T.Tensor(5.0), budget_loss(surrogate_cost(model.reparam_layers()), budget))).backward()

    return {
        "stopband (300k, grad)": lambda: kernels.stopband(w, 30.0, 4, True),
        "stopband (300k)": lambda: kernels.stopband(w, 30.0, 4, False),
        f"im2col ({batch}x32x16x16, 3x3)": lambda: kernels.im2col(x, 3, 3, 1, 1),
        f"col2im ({batch}x32x16x16, 3x3)": lambda: kernels.col2im(cols, x.shape, 3, 3, 1, 1),
        f"maxpool ({batch}x32x16x16)": lambda: kernels.maxpool(x, 2),
        "maxpool backward": lambda: kernels.maxpool_backward(pooled, arg, 2, 16, 16),
        f"conv4-small train step (batch {batch})": step,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args(argv)
    if not kernels.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")

    prev = kernels.get_backend()
    results = {}
    try:
        for backend in ("numpy", "numba"):
            kernels.set_backend(backend)
            for name, fn in cases(args.batch).items():
                results.setdefault(name, {})[backend] = median_time(fn, args.repeat)
    finally:
        kernels.set_backend(prev)

    width = max(len(n) for n in results)
    print(f"{'kernel'.ljust(width)}  {'numpy ms':>10}  {'numba ms':>10}  {'speedup':>8}")
    for name, r in results.items():
        print(f"{name.ljust(width)}  {r['numpy'] * 1e3:10.3f}  {r['numba'] * 1e3:10.3f}  "
              f"{r['numpy'] / r['numba']:7.2f}x")


if __name__ == "__main__":
    main()
