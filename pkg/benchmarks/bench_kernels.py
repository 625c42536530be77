"""Time the compiled kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from mclatent import kernels


def cases(rng):
    d = rng.uniform(0.0, 4.0, (48 * 120, 3))
    x, c = rng.normal(size=(20000, 256)), rng.normal(size=(5, 256))
    scores, labels = rng.normal(size=5000), rng.integers(0, 2, 5000).astype(np.uint8)
    return {
        "mcl_annealed (5760 x 3)": lambda impl: kernels.mcl_annealed(d, 0.3, impl=impl),
        "kmeans_assign (20000 x 256, k=5)": lambda impl: kernels.kmeans_assign(x, c, impl=impl),
        "average_precision (n=5000)": lambda impl: kernels.average_precision(scores, labels, impl=impl),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = kernels.implementations()
    print(f"default backend: {kernels.BACKEND}; available: {', '.join(sorted(impls))}")
    for name, fn in cases(np.random.default_rng(0)).items():
        times = {}
        for tag, impl in sorted(impls.items()):
            number = 10
            times[tag] = min(timeit.repeat(lambda: fn(impl), number=number, repeat=args.repeat)) / number
        line = "  ".join(f"{tag} {t * 1e3:8.3f} ms" for tag, t in times.items())
        speedup = f"  speedup x{times['python'] / times['compiled']:.1f}" if "compiled" in times else ""
        print(f"{name:34s} {line}{speedup}")


if __name__ == "__main__":
    main()
