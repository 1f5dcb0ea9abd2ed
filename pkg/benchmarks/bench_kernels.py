"""Compiled vs numpy kernels on the sizes the pipeline actually sees.

    python benchmarks/bench_kernels.py [--repeat N]

Lloyd and the exact 1-D k-means run on the distinct values of a 64x64
heatmap; the NLI system is assembled for a disk mask on a 64x64 patch.
"""
import argparse
import timeit

import numpy as np

from ibo_eval import kernels


def _inputs(seed=0):
    rng = np.random.default_rng(seed)
    hm = np.round(rng.random((64, 64)) ** 2, 4)
    values, counts = np.unique(hm, return_counts=True)
    weights = counts.astype(np.float64)
    init = np.quantile(values, [0.1, 0.3, 0.5, 0.7, 0.9])
    yy, xx = np.mgrid[0:64, 0:64]
    mask = ((yy - 32) ** 2 + (xx - 30) ** 2 <= 20 ** 2).astype(np.uint8)
    return values, weights, init, mask


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    values, weights, init, mask = _inputs()
    cases = {
        "lloyd_1d": lambda be: be.lloyd_1d(values, weights, init, 300),
        "kmeans1d_dp": lambda be: be.kmeans1d_dp(values, weights, 5),
        "nli_system": lambda be: be.nli_system(mask),
    }
    if "cython" not in kernels.BACKENDS:
        print("compiled extension not built; only the numpy fallback is timed")
    print(f"{len(values)} distinct heat values, {int(mask.sum())} masked pixels")
    print(f"{'kernel':14s}" + "".join(f"{name:>14s}" for name in kernels.BACKENDS) + "     speedup")
    for case, fn in cases.items():
        times = {}
        for name, be in kernels.BACKENDS.items():
            fn(be)
            times[name] = min(timeit.repeat(lambda: fn(be), number=1, repeat=args.repeat))
        row = f"{case:14s}" + "".join(f"{times[n] * 1e3:12.2f}ms" for n in kernels.BACKENDS)
        if "cython" in times:
            row += f"  {times['python'] / times['cython']:9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
