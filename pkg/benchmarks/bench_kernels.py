"""Compiled vs numpy per-example clip-and-sum, plus a full DPSGD step.

    python3 benchmarks/bench_kernels.py [--batch 128] [--hidden 64] [--repeat 20]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from dpcompress import _kernels_py, kernels
from dpcompress.data import make_synthetic
from dpcompress.dpsgd import Batch, per_example_factors
from dpcompress.model import ModelDims, random_model


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--blocks", type=int, default=4)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    model = random_model(ModelDims(32, args.hidden, 3), args.blocks, 0)
    data = make_synthetic(3, args.batch, 32, seed=1)
    factors = per_example_factors(model, Batch(data.features, data.labels))
    impls = [("python", _kernels_py)]
    if kernels.BACKEND_NAME == "cython":
        impls.insert(0, ("cython", kernels.backend))
    else:
        print("compiled extension not available; timing the numpy path only")

    print(f"batch={args.batch} hidden={args.hidden} blocks={args.blocks} params={model.num_params()}")
    results = {}
    for name, impl in impls:
        sums, _ = kernels.clipped_sum(factors, args.batch, 1.0, impl)
        results[name] = np.concatenate([s.ravel() for s in sums])
        t = best_of(lambda: kernels.clipped_sum(factors, args.batch, 1.0, impl), args.repeat)
        print(f"  clipped_sum[{name:6s}]  {1e3 * t:8.2f} ms")
    if len(results) == 2:
        diff = np.max(np.abs(results["cython"] - results["python"]))
        print(f"  max |cython - python| = {diff:.3g}")

    t = best_of(lambda: per_example_factors(model, Batch(data.features, data.labels)), args.repeat)
    print(f"  forward+backward        {1e3 * t:8.2f} ms")


if __name__ == "__main__":
    main()
